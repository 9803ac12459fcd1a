//! Deterministic planar world of constant-velocity boxes seen by a moving,
//! zooming camera.
//!
//! Each clip mirrors a short driving sequence: frames at a fixed rate, an
//! ego-motion record per frame and annotations for a single future frame.

mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{make_dataset, read_dataset, Dataset, DatasetManifest, SampleRecord, MANIFEST_VERSION};

use crate::assignment::{Annotation, AnnotationSet, BBox};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::EgoMotionRecord;

/// Minimum visible fraction of a box for it to be annotated.
pub const VISIBILITY_THRESHOLD: f64 = 0.25;

/// Per-class appearance and motion ranges. Sizes are world units (pixels at
/// zoom 1), speeds world units per second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub speed: [f64; 2],
    pub width: [f64; 2],
    pub height: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub classes: Vec<ClassSpec>,
    /// Inclusive range of objects per clip.
    pub objects: [usize; 2],
    /// Camera speed in world units per second, random heading.
    pub camera_speed: [f64; 2],
    /// Zoom change per second.
    pub zoom_rate: [f64; 2],
    pub frame_rate: f64,
    pub frames_per_clip: usize,
    /// Index of the annotated (future) frame within the clip.
    pub annotated_frame: usize,
    /// Input frames stored per sample.
    pub input_frames: usize,
    /// Seconds between the last input frame and the future frame.
    pub horizon: f64,
    /// Probability that an object appears partway into the clip.
    pub spawn_probability: f64,
    /// Probability that an object disappears partway into the clip.
    pub despawn_probability: f64,
    pub intensity: [f64; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    speed: [4.0, 16.0],
                    width: [9.0, 14.0],
                    height: [7.0, 10.0],
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    speed: [0.0, 4.0],
                    width: [4.0, 6.0],
                    height: [6.0, 9.0],
                },
            ],
            objects: [1, 4],
            camera_speed: [8.0, 16.0],
            zoom_rate: [-0.05, 0.05],
            frame_rate: 2.0,
            frames_per_clip: 13,
            annotated_frame: 6,
            input_frames: 3,
            horizon: 0.5,
            spawn_probability: 0.05,
            despawn_probability: 0.05,
            intensity: [0.5, 1.0],
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.classes.is_empty() || self.classes.len() > 3 {
            return Err(Error::Config(format!(
                "1 to 3 classes are supported (one colour channel each), got {}",
                self.classes.len()
            )));
        }
        for c in &self.classes {
            check_range(&format!("{} speed", c.name), c.speed)?;
            check_range(&format!("{} width", c.name), c.width)?;
            check_range(&format!("{} height", c.name), c.height)?;
            if c.width[0] <= 0.0 || c.height[0] <= 0.0 || c.speed[0] < 0.0 {
                return Err(Error::Config(format!("{} sizes must be positive", c.name)));
            }
        }
        if self.objects[0] > self.objects[1] {
            return Err(Error::Config(format!("object range {:?} is empty", self.objects)));
        }
        check_range("camera speed", self.camera_speed)?;
        check_range("zoom rate", self.zoom_rate)?;
        check_range("intensity", self.intensity)?;
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config("horizon must be finite and >= 0".into()));
        }
        if self.input_frames == 0 {
            return Err(Error::Config("at least one input frame is required".into()));
        }
        if self.annotated_frame >= self.frames_per_clip {
            return Err(Error::Config("annotated frame lies outside the clip".into()));
        }
        let needed = (self.input_frames - 1) as f64 + self.horizon * self.frame_rate;
        if needed > self.annotated_frame as f64 + 1e-9 {
            return Err(Error::Config(format!(
                "{} input frames at horizon {} s do not fit before annotated frame {}",
                self.input_frames, self.horizon, self.annotated_frame
            )));
        }
        for (n, p) in [
            ("spawn", self.spawn_probability),
            ("despawn", self.despawn_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{n} probability must lie in [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        // the camera must stay in front of the scene for the whole clip
        let t_end = (self.frames_per_clip - 1) as f64 / self.frame_rate;
        let z_min = 1.0 + self.zoom_rate[0].min(0.0) * t_end;
        if z_min <= 0.0 {
            return Err(Error::Config("zoom rate drives the zoom to zero within a clip".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    /// Time of the annotated frame.
    pub fn future_time(&self) -> f64 {
        self.annotated_frame as f64 / self.frame_rate
    }

    /// Input frame times, oldest first.
    pub fn input_times(&self) -> Vec<f64> {
        let last = self.future_time() - self.horizon;
        (0..self.input_frames)
            .map(|k| last - (self.input_frames - 1 - k) as f64 * self.dt())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    pub class: usize,
    /// World center at time 0.
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub size: [f64; 2],
    pub intensity: f64,
    /// Alive on `[alive.0, alive.1)`.
    pub alive: (f64, f64),
}

impl WorldObject {
    pub fn center_at(&self, t: f64) -> [f64; 2] {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
        ]
    }

    pub fn alive_at(&self, t: f64) -> bool {
        t >= self.alive.0 && t < self.alive.1
    }

    /// World box `(cx, cy, w, h)` at time `t`.
    pub fn world_box(&self, t: f64) -> BBox {
        let c = self.center_at(t);
        BBox::new(c[0], c[1], self.size[0], self.size[1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraState {
    pub position: [f64; 2],
    pub zoom: f64,
    pub timestamp: f64,
}

/// Constant-velocity translation with linear zoom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPath {
    pub velocity: [f64; 2],
    pub zoom_rate: f64,
}

impl CameraPath {
    pub fn at(&self, t: f64) -> CameraState {
        CameraState {
            position: [self.velocity[0] * t, self.velocity[1] * t],
            zoom: 1.0 + self.zoom_rate * t,
            timestamp: t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    pub seed: u64,
    pub objects: Vec<WorldObject>,
    pub camera: CameraPath,
}

impl Clip {
    /// Camera state at each clip frame.
    pub fn cameras(&self, config: &SceneConfig) -> Vec<CameraState> {
        (0..config.frames_per_clip)
            .map(|k| self.camera.at(k as f64 * config.dt()))
            .collect()
    }

    /// Annotations visible at time `t`.
    pub fn annotations(&self, t: f64, config: &SceneConfig) -> AnnotationSet {
        let cam = self.camera.at(t);
        let (h, w) = (config.image_height as f64, config.image_width as f64);
        AnnotationSet(
            self.objects
                .iter()
                .filter(|o| o.alive_at(t))
                .filter_map(|o| {
                    project(&o.world_box(t), &cam, config).map(|b| Annotation {
                        class: o.class,
                        bbox: BBox::new(b.cx / w, b.cy / h, b.w / w, b.h / h),
                    })
                })
                .collect(),
        )
    }
}

fn unclipped(world: &BBox, cam: &CameraState, config: &SceneConfig) -> BBox {
    BBox::new(
        (world.cx - cam.position[0]) * cam.zoom + config.image_width as f64 / 2.0,
        (world.cy - cam.position[1]) * cam.zoom + config.image_height as f64 / 2.0,
        world.w * cam.zoom,
        world.h * cam.zoom,
    )
}

/// World box to image box in pixels, clipped to the frame. `None` when less
/// than a quarter of the box is visible.
pub fn project(world: &BBox, cam: &CameraState, config: &SceneConfig) -> Option<BBox> {
    let b = unclipped(world, cam, config);
    let [x1, y1, x2, y2] = b.corners();
    let (w, h) = (config.image_width as f64, config.image_height as f64);
    let (cx1, cy1, cx2, cy2) = (x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h));
    if cx2 <= cx1 || cy2 <= cy1 {
        return None;
    }
    let visible = (cx2 - cx1) * (cy2 - cy1);
    if visible < VISIBILITY_THRESHOLD * b.area() {
        return None;
    }
    Some(BBox::from_corners(cx1, cy1, cx2, cy2))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of clip `index` of a split: `splitmix64(seed ^ splitmix64(tag + index))`.
pub fn clip_seed(master: u64, split: &str, index: u64) -> u64 {
    let tag = split
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix64(master ^ splitmix64(tag.wrapping_add(index)))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn heading(rng: &mut ChaCha8Rng, speed: f64) -> [f64; 2] {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [speed * a.cos(), speed * a.sin()]
}

/// Samples one clip. Objects are placed so that their centers lie inside the
/// view at the annotated frame.
pub fn simulate_clip(config: &SceneConfig, seed: u64) -> Result<Clip> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let camera_speed = uniform(&mut rng, config.camera_speed);
    let camera = CameraPath {
        velocity: heading(&mut rng, camera_speed),
        zoom_rate: uniform(&mut rng, config.zoom_rate),
    };
    let t_f = config.future_time();
    let t_end = (config.frames_per_clip - 1) as f64 * config.dt() + config.dt();
    let cam_f = camera.at(t_f);
    let n = rng.random_range(config.objects[0]..=config.objects[1]);
    let mut objects = Vec::with_capacity(n);
    for id in 0..n {
        let class = rng.random_range(0..config.classes.len());
        let spec = &config.classes[class];
        let size = [uniform(&mut rng, spec.width), uniform(&mut rng, spec.height)];
        let speed = uniform(&mut rng, spec.speed);
        let velocity = heading(&mut rng, speed);
        let u = rng.random_range(0.1..0.9) * config.image_width as f64;
        let v = rng.random_range(0.1..0.9) * config.image_height as f64;
        let at_f = [
            cam_f.position[0] + (u - config.image_width as f64 / 2.0) / cam_f.zoom,
            cam_f.position[1] + (v - config.image_height as f64 / 2.0) / cam_f.zoom,
        ];
        let center = [at_f[0] - velocity[0] * t_f, at_f[1] - velocity[1] * t_f];
        let intensity = uniform(&mut rng, config.intensity);
        let start = if rng.random_bool(config.spawn_probability) {
            rng.random_range(0.0..t_end)
        } else {
            f64::MIN
        };
        let end = if rng.random_bool(config.despawn_probability) {
            rng.random_range(0.0..t_end)
        } else {
            f64::MAX
        };
        objects.push(WorldObject {
            id,
            class,
            center,
            velocity,
            size,
            intensity,
            alive: (start, end),
        });
    }
    Ok(Clip {
        seed,
        objects,
        camera,
    })
}

/// Rasterizes the scene at time `t`. A pixel is covered when its center lies
/// inside the (unclipped) image box; later objects paint over earlier ones.
pub fn render_frame(clip: &Clip, t: f64, config: &SceneConfig, noise_seed: u64) -> Tensor<f32> {
    let (h, w) = (config.image_height, config.image_width);
    let mut data = vec![0.0f32; 3 * h * w];
    let cam = clip.camera.at(t);
    for o in clip.objects.iter().filter(|o| o.alive_at(t)) {
        let b = unclipped(&o.world_box(t), &cam, config);
        let [x1, y1, x2, y2] = b.corners();
        let cols = pixel_span(x1, x2, w);
        let rows = pixel_span(y1, y2, h);
        for r in rows {
            for c in cols.clone() {
                for ch in 0..3 {
                    data[(ch * h + r) * w + c] = 0.0;
                }
                data[(o.class * h + r) * w + c] = o.intensity as f32;
            }
        }
    }
    if config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let normal = Normal::new(0.0, config.noise_sigma).expect("valid sigma");
        for v in &mut data {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("frame shape")
}

/// Pixels `i` with `lo <= i + 0.5 < hi`, clipped to `[0, n)`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let first = (lo - 0.5).ceil().max(0.0);
    let end = (hi - 0.5).ceil().clamp(0.0, n as f64);
    if first >= end {
        0..0
    } else {
        first as usize..end as usize
    }
}

/// Ego-motion of `cam` relative to `prev`.
pub fn ego_signals(cam: &CameraState, prev: &CameraState) -> Result<EgoMotionRecord> {
    let dt = cam.timestamp - prev.timestamp;
    if !(dt > 0.0) {
        return Err(Error::Input(format!(
            "camera states must be strictly increasing in time (dt = {dt})"
        )));
    }
    let translation = [
        cam.position[0] - prev.position[0],
        cam.position[1] - prev.position[1],
    ];
    Ok(EgoMotionRecord {
        translation,
        speed: translation[0].hypot(translation[1]) / dt,
        rotation: (cam.zoom - prev.zoom) / dt,
        timestamp: cam.timestamp,
    })
}

/// One training/evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub clip_seed: u64,
    /// Input frames, oldest first.
    pub frames: Vec<Tensor<f32>>,
    pub timestamps: Vec<f64>,
    pub egos: Vec<EgoMotionRecord>,
    /// The annotated frame; only baselines that peek at the future use it.
    pub future_frame: Tensor<f32>,
    pub future_timestamp: f64,
    pub annotations: AnnotationSet,
}

impl Sample {
    /// The last `t` input frames, timestamps and ego records.
    pub fn window(&self, t: usize) -> Result<(&[Tensor<f32>], &[f64], &[EgoMotionRecord])> {
        let n = self.frames.len();
        if t == 0 || t > n {
            return Err(Error::Config(format!(
                "sample {} holds {n} input frames, {t} requested",
                self.id
            )));
        }
        Ok((&self.frames[n - t..], &self.timestamps[n - t..], &self.egos[n - t..]))
    }
}

/// Builds the sample for one clip.
pub fn make_sample(config: &SceneConfig, id: usize, seed: u64) -> Result<Sample> {
    let clip = simulate_clip(config, seed)?;
    let times = config.input_times();
    let t_f = config.future_time();
    let frame_seed = |k: u64| splitmix64(seed ^ splitmix64(0x6672_616d_6500u64.wrapping_add(k)));
    let frames = times
        .iter()
        .enumerate()
        .map(|(k, &t)| render_frame(&clip, t, config, frame_seed(k as u64)))
        .collect();
    let egos = times
        .iter()
        .map(|&t| ego_signals(&clip.camera.at(t), &clip.camera.at(t - config.dt())))
        .collect::<Result<_>>()?;
    Ok(Sample {
        id,
        clip_seed: seed,
        frames,
        timestamps: times,
        egos,
        future_frame: render_frame(&clip, t_f, config, frame_seed(u64::MAX)),
        future_timestamp: t_f,
        annotations: clip.annotations(t_f, config),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(x: f64, y: f64, zoom: f64) -> CameraState {
        CameraState {
            position: [x, y],
            zoom,
            timestamp: 0.0,
        }
    }

    #[test]
    fn projection_identity_shift_and_zoom() {
        let c = SceneConfig::default();
        let b = BBox::new(0.0, 0.0, 8.0, 6.0);
        let p = project(&b, &cam(0.0, 0.0, 1.0), &c).unwrap();
        assert_eq!(p, BBox::new(32.0, 32.0, 8.0, 6.0));
        let s = project(&b, &cam(5.0, 0.0, 1.0), &c).unwrap();
        assert_eq!(s, BBox::new(27.0, 32.0, 8.0, 6.0));
        let z = project(&b, &cam(0.0, 0.0, 2.0), &c).unwrap();
        assert_eq!((z.w, z.h), (16.0, 12.0));
    }

    #[test]
    fn projection_visibility_threshold() {
        let c = SceneConfig::default();
        // 10 px wide box with 2 px inside the frame: 20 % visible
        let b = BBox::new(-35.0, 0.0, 10.0, 10.0);
        assert!(project(&b, &cam(0.0, 0.0, 1.0), &c).is_none());
        // 3 px inside: 30 % visible, clipped to the border
        let b = BBox::new(-34.0, 0.0, 10.0, 10.0);
        let p = project(&b, &cam(0.0, 0.0, 1.0), &c).unwrap();
        assert!((p.w - 3.0).abs() < 1e-12 && (p.cx - 1.5).abs() < 1e-12);
    }

    fn static_config() -> SceneConfig {
        let mut c = SceneConfig::default();
        for s in &mut c.classes {
            s.speed = [0.0, 0.0];
        }
        c.camera_speed = [0.0, 0.0];
        c.zoom_rate = [0.0, 0.0];
        c.spawn_probability = 0.0;
        c.despawn_probability = 0.0;
        c.noise_sigma = 0.0;
        c
    }

    #[test]
    fn static_world_renders_identical_frames() {
        let c = static_config();
        let s = make_sample(&c, 0, 11).unwrap();
        assert!(s.frames.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(s.frames[0], s.future_frame);
        assert!(s.egos.iter().all(|e| e.translation == [0.0, 0.0] && e.speed == 0.0));
    }

    #[test]
    fn object_advances_v_dt_per_frame() {
        let o = WorldObject {
            id: 0,
            class: 0,
            center: [0.0, 0.0],
            velocity: [10.0, 0.0],
            size: [4.0, 4.0],
            intensity: 1.0,
            alive: (f64::MIN, f64::MAX),
        };
        assert_eq!(o.center_at(0.5), [5.0, 0.0]);
        assert_eq!(o.center_at(1.0)[0] - o.center_at(0.5)[0], 5.0);
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = SceneConfig::default();
        assert_eq!(simulate_clip(&c, 3).unwrap(), simulate_clip(&c, 3).unwrap());
        assert_eq!(make_sample(&c, 0, 3).unwrap(), make_sample(&c, 0, 3).unwrap());
    }

    #[test]
    fn empty_scene_is_black() {
        let c = static_config();
        let clip = Clip {
            seed: 0,
            objects: vec![],
            camera: CameraPath {
                velocity: [0.0, 0.0],
                zoom_rate: 0.0,
            },
        };
        let f = render_frame(&clip, 0.0, &c, 0);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ego_arithmetic() {
        let a = CameraState {
            position: [0.0, 0.0],
            zoom: 1.0,
            timestamp: 0.0,
        };
        let b = CameraState {
            position: [1.0, 0.0],
            zoom: 1.1,
            timestamp: 0.5,
        };
        let e = ego_signals(&b, &a).unwrap();
        assert_eq!(e.translation, [1.0, 0.0]);
        assert!((e.speed - 2.0).abs() < 1e-12);
        assert!((e.rotation - 0.2).abs() < 1e-12);
        assert!(ego_signals(&a, &a).is_err());
        let still = ego_signals(&CameraState { timestamp: 0.5, ..a }, &a).unwrap();
        assert_eq!((still.speed, still.rotation), (0.0, 0.0));
    }

    #[test]
    fn window_fit_is_validated() {
        let c = SceneConfig {
            input_frames: 8,
            ..SceneConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn input_times_end_horizon_before_future() {
        let c = SceneConfig::default();
        let t = c.input_times();
        assert_eq!(t, vec![1.5, 2.0, 2.5]);
        assert_eq!(c.future_time() - t[2], 0.5);
    }
}
