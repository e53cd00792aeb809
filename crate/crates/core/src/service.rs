//! Interactive editing sessions: step the refinement, overwrite parts of
//! the estimate, export composites. Each session is guarded by a fair
//! mutex so requests to it run one at a time in arrival order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{FairMutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::compositing::{init_state, MattingState, ObservedImage, Space, Trimap};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rim::{crop, pad_to_even, rim_step, zero_hidden, HiddenState, IterationConfig, RimWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTarget {
    Foreground,
    Background,
    Alpha,
}

impl EditTarget {
    pub fn channels(self) -> usize {
        match self {
            EditTarget::Alpha => 1,
            _ => 3,
        }
    }
}

impl FromStr for EditTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(EditTarget::Foreground),
            "background" => Ok(EditTarget::Background),
            "alpha" => Ok(EditTarget::Alpha),
            _ => Err(Error::Parameter(format!("unknown edit target '{s}'"))),
        }
    }
}

/// Replace `target` at the masked pixels with `values` (canonical space).
#[derive(Clone, Debug, PartialEq)]
pub struct EditCommand {
    pub target: EditTarget,
    /// (1, 1, h, w); pixels with value > 0.5 are edited.
    pub mask: Tensor,
    /// (1, 3, h, w) or (1, 1, h, w) for alpha; only masked pixels are read.
    pub values: Tensor,
    /// Leave the hidden state alone (debugging only).
    pub keep_hidden: bool,
}

impl EditCommand {
    pub fn new(target: EditTarget, mask: Tensor, values: Tensor) -> Self {
        EditCommand {
            target,
            mask,
            values,
            keep_hidden: false,
        }
    }

    fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.mask.dims() != [1, 1, h, w] {
            return Err(Error::Shape(format!(
                "edit mask {:?} does not match the {h}x{w} session",
                self.mask.dims()
            )));
        }
        let c = self.target.channels();
        if self.values.dims() != [1, c, h, w] {
            return Err(Error::Shape(format!(
                "edit values {:?} do not match (1, {c}, {h}, {w})",
                self.values.dims()
            )));
        }
        let hw = h * w;
        let bad = (0..hw)
            .filter(|&p| self.mask.data()[p] > 0.5)
            .flat_map(|p| (0..c).map(move |ch| ch * hw + p))
            .filter(|&i| !(0.0..=1.0).contains(&self.values.data()[i]))
            .count();
        if bad > 0 {
            return Err(Error::Validation(format!("edit has {bad} masked values outside [0, 1]")));
        }
        Ok(())
    }

    pub fn masked_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Requests as they were applied, for replay.
#[derive(Clone, Debug, PartialEq)]
pub enum Operation {
    Step(usize),
    Edit(EditCommand),
    Reset,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionSummary {
    pub id: String,
    pub t: usize,
    pub iterations: usize,
    pub height: usize,
    pub width: usize,
    pub edits: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    Foreground,
    Background,
    Alpha,
    Composite,
}

impl FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "foreground" => Ok(ExportKind::Foreground),
            "background" => Ok(ExportKind::Background),
            "alpha" => Ok(ExportKind::Alpha),
            "composite" => Ok(ExportKind::Composite),
            _ => Err(Error::Parameter(format!("unknown export '{s}'"))),
        }
    }
}

/// New background for a composite export.
#[derive(Clone, Debug, PartialEq)]
pub enum NewBackground {
    Color([f32; 3]),
    Image(Tensor),
}

impl Default for NewBackground {
    fn default() -> Self {
        NewBackground::Color([0.0; 3])
    }
}

pub struct Session {
    id: String,
    height: usize,
    width: usize,
    image: ObservedImage,
    trimap: Option<Trimap>,
    config: IterationConfig,
    x0: MattingState,
    /// Even-padded working copies.
    work_image: ObservedImage,
    x: MattingState,
    hidden: HiddenState,
    /// What readers see: the canonical crop of `x`, with edited pixels
    /// holding exactly the values the user supplied.
    view: MattingState,
    t: usize,
    history: Vec<EditCommand>,
    journal: Vec<Operation>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("height", &self.height)
            .field("width", &self.width)
            .field("t", &self.t)
            .finish_non_exhaustive()
    }
}

fn crop_state(x: &MattingState, h: usize, w: usize) -> Result<MattingState> {
    MattingState::from_packed(&crop(&x.packed(), h, w), x.space)
}

impl Session {
    pub fn new(
        id: String,
        image: ObservedImage,
        alpha0: &Tensor,
        trimap: Option<Trimap>,
        config: IterationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let x0 = init_state(&image, trimap.as_ref(), alpha0)?;
        let (height, width) = (image.height(), image.width());
        let work_image = ObservedImage::new(pad_to_even(image.tensor()))?;
        let x = MattingState::from_packed(&pad_to_even(&x0.packed()), Space::Canonical)?.to_network_space()?;
        let (ph, pw) = x.dims()?;
        Ok(Session {
            id,
            height,
            width,
            image,
            trimap,
            config,
            view: x0.clone(),
            x0,
            work_image,
            x,
            hidden: HiddenState::zeros(ph, pw),
            t: 0,
            history: Vec::new(),
            journal: Vec::new(),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn image(&self) -> &ObservedImage {
        &self.image
    }

    pub fn trimap(&self) -> Option<&Trimap> {
        self.trimap.as_ref()
    }

    pub fn config(&self) -> &IterationConfig {
        &self.config
    }

    /// Current canonical estimate.
    pub fn state(&self) -> &MattingState {
        &self.view
    }

    /// Hidden state cropped to the image.
    pub fn hidden(&self) -> HiddenState {
        HiddenState {
            h1: crop(&self.hidden.h1, self.height.div_ceil(2), self.width.div_ceil(2)),
            h2: crop(&self.hidden.h2, self.height, self.width),
        }
    }

    pub fn history(&self) -> &[EditCommand] {
        &self.history
    }

    pub fn journal(&self) -> &[Operation] {
        &self.journal
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            t: self.t,
            iterations: self.config.iterations,
            height: self.height,
            width: self.width,
            edits: self.history.len(),
        }
    }

    /// `n` refinement steps. Stepping past the configured count is allowed.
    pub fn step(&mut self, weights: &RimWeights, n: usize) -> Result<SessionSummary> {
        let mut x = self.x.clone();
        let mut hidden = self.hidden.clone();
        for i in 0..n {
            let (dx, next) = rim_step(&self.work_image, &x, &hidden, weights, &self.config)?;
            let mut p = x.packed();
            p.add_assign(&dx)?;
            if !p.all_finite() || !next.h1.all_finite() || !next.h2.all_finite() {
                return Err(Error::NonFinite(format!("state diverged at iteration {}", self.t + i + 1)));
            }
            x = MattingState::from_packed(&p, Space::Network)?;
            hidden = next;
        }
        if n > 0 {
            self.view = crop_state(&x.to_canonical_space()?, self.height, self.width)?;
            self.x = x;
            self.hidden = hidden;
            self.t += n;
        }
        self.journal.push(Operation::Step(n));
        Ok(self.summary())
    }

    pub fn apply_edit(&mut self, cmd: EditCommand) -> Result<SessionSummary> {
        let (h, w) = (self.height, self.width);
        cmd.validate(h, w)?;
        if cmd.masked_pixels() == 0 {
            self.journal.push(Operation::Edit(cmd));
            return Ok(self.summary());
        }
        let (_, pw) = self.x.dims()?;
        let (ph, _) = self.x.dims()?;
        let hw = h * w;
        let phw = ph * pw;
        let c = cmd.target.channels();
        let (net, view) = match cmd.target {
            EditTarget::Foreground => (&mut self.x.fg, &mut self.view.fg),
            EditTarget::Background => (&mut self.x.bg, &mut self.view.bg),
            EditTarget::Alpha => (&mut self.x.alpha, &mut self.view.alpha),
        };
        for y in 0..h {
            for xx in 0..w {
                let p = y * w + xx;
                if cmd.mask.data()[p] <= 0.5 {
                    continue;
                }
                for ch in 0..c {
                    let v = cmd.values.data()[ch * hw + p];
                    view.data_mut()[ch * hw + p] = v;
                    net.data_mut()[ch * phw + y * pw + xx] = 2.0 * v - 1.0;
                }
            }
        }
        if !cmd.keep_hidden {
            let mut mask = Tensor::zeros(&[1, 1, ph, pw]);
            for y in 0..h {
                let row = &cmd.mask.data()[y * w..(y + 1) * w];
                mask.data_mut()[y * pw..y * pw + w].copy_from_slice(row);
            }
            self.hidden = zero_hidden(&self.hidden, &mask)?;
        }
        self.history.push(cmd.clone());
        self.journal.push(Operation::Edit(cmd));
        Ok(self.summary())
    }

    pub fn reset(&mut self) -> SessionSummary {
        let (ph, pw) = self.x.dims().expect("valid state");
        self.x = MattingState::from_packed(&pad_to_even(&self.x0.packed()), Space::Canonical)
            .and_then(|s| s.to_network_space())
            .expect("x0 is valid");
        self.hidden = HiddenState::zeros(ph, pw);
        self.view = self.x0.clone();
        self.t = 0;
        self.history.clear();
        self.journal.push(Operation::Reset);
        self.summary()
    }

    pub fn apply(&mut self, weights: &RimWeights, op: Operation) -> Result<SessionSummary> {
        match op {
            Operation::Step(n) => self.step(weights, n),
            Operation::Edit(cmd) => self.apply_edit(cmd),
            Operation::Reset => Ok(self.reset()),
        }
    }

    /// Canonical raster, clamped to [0, 1].
    pub fn export(&self, kind: ExportKind, background: &NewBackground) -> Result<Tensor> {
        let s = &self.view;
        let (h, w) = (self.height, self.width);
        let clamp = |t: &Tensor| t.map(|v| v.clamp(0.0, 1.0));
        Ok(match kind {
            ExportKind::Foreground => clamp(&s.fg),
            ExportKind::Background => clamp(&s.bg),
            ExportKind::Alpha => clamp(&s.alpha),
            ExportKind::Composite => {
                let bg = match background {
                    NewBackground::Color(c) => {
                        let mut t = Tensor::zeros(&[1, 3, h, w]);
                        for (ch, v) in c.iter().enumerate() {
                            t.plane_mut(0, ch).fill(*v);
                        }
                        t
                    }
                    NewBackground::Image(t) => {
                        if t.dims() != [1, 3, h, w] {
                            return Err(Error::Shape(format!(
                                "background {:?} does not match the {h}x{w} session",
                                t.dims()
                            )));
                        }
                        t.clone()
                    }
                };
                let view = MattingState {
                    space: Space::Canonical,
                    fg: clamp(&s.fg),
                    bg: clamp(&s.bg),
                    alpha: clamp(&s.alpha),
                };
                clamp(&crate::compositing::composite_over(&view, &bg)?)
            }
        })
    }
}

/// Shared weights plus a registry of independently locked sessions.
pub struct SessionStore {
    weights: Arc<RimWeights>,
    sessions: RwLock<HashMap<String, Arc<FairMutex<Session>>>>,
    counter: AtomicU64,
    salt: u64,
}

impl SessionStore {
    pub fn new(weights: RimWeights) -> Self {
        SessionStore {
            weights: Arc::new(weights),
            sessions: RwLock::new(HashMap::new()),
            counter: AtomicU64::new(0),
            salt: rand::random(),
        }
    }

    pub fn weights(&self) -> &RimWeights {
        &self.weights
    }

    fn next_id(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        format!("{:08x}{:08x}", (self.salt >> 32) as u32 ^ n as u32, n)
    }

    pub fn create(
        &self,
        image: ObservedImage,
        alpha0: &Tensor,
        trimap: Option<Trimap>,
        config: IterationConfig,
    ) -> Result<SessionSummary> {
        let id = self.next_id();
        let session = Session::new(id.clone(), image, alpha0, trimap, config)?;
        let summary = session.summary();
        self.sessions.write().insert(id, Arc::new(FairMutex::new(session)));
        Ok(summary)
    }

    pub fn session(&self, id: &str) -> Result<Arc<FairMutex<Session>>> {
        self.sessions
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(id.to_owned()))
    }

    /// Run `f` while holding the session's lock.
    pub fn with<T>(&self, id: &str, f: impl FnOnce(&mut Session, &RimWeights) -> Result<T>) -> Result<T> {
        let s = self.session(id)?;
        let mut guard = s.lock();
        f(&mut guard, &self.weights)
    }

    pub fn step(&self, id: &str, n: usize) -> Result<SessionSummary> {
        self.with(id, |s, w| s.step(w, n))
    }

    pub fn edit(&self, id: &str, cmd: EditCommand) -> Result<SessionSummary> {
        self.with(id, |s, _| s.apply_edit(cmd))
    }

    pub fn reset(&self, id: &str) -> Result<SessionSummary> {
        self.with(id, |s, _| Ok(s.reset()))
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary> {
        self.with(id, |s, _| Ok(s.summary()))
    }

    pub fn export(&self, id: &str, kind: ExportKind, background: &NewBackground) -> Result<Tensor> {
        self.with(id, |s, _| s.export(kind, background))
    }

    pub fn delete(&self, id: &str) -> Result<()> {
        self.sessions
            .write()
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::NotFound(id.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.sessions.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Box-filter downsample so the long side is at most `max_side`.
pub fn preview(t: &Tensor, max_side: usize) -> Tensor {
    let (_, c, h, w) = t.nchw().expect("4-d");
    let long = h.max(w);
    if long <= max_side {
        return t.clone();
    }
    let f = long.div_ceil(max_side);
    let (oh, ow) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Tensor::zeros(&[1, c, oh, ow]);
    for ch in 0..c {
        let src = t.plane(0, ch);
        let dst = out.plane_mut(0, ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut sum, mut n) = (0.0f32, 0.0f32);
                for y in oy * f..((oy + 1) * f).min(h) {
                    for x in ox * f..((ox + 1) * f).min(w) {
                        sum += src[y * w + x];
                        n += 1.0;
                    }
                }
                dst[oy * ow + ox] = sum / n;
            }
        }
    }
    out
}

pub const PREVIEW_MAX_SIDE: usize = 1024;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rim::run_inference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(h: usize, w: usize) -> (RimWeights, ObservedImage, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let weights = RimWeights::random(&mut rng);
        let img = ObservedImage::new(Tensor::uniform(&[1, 3, h, w], 0.5, &mut rng).map(|v| v + 0.5)).unwrap();
        let a = Tensor::uniform(&[1, 1, h, w], 0.5, &mut rng).map(|v| v + 0.5);
        (weights, img, a)
    }

    #[test]
    fn steps_match_run_inference() {
        for (h, w) in [(12, 16), (11, 9)] {
            let (weights, img, a) = fixture(h, w);
            let cfg = IterationConfig::with_iterations(3);
            let mut s = Session::new("s".into(), img.clone(), &a, None, cfg.clone()).unwrap();
            let traj = run_inference(&img, s.state(), &weights, &cfg, None).unwrap();
            s.step(&weights, 2).unwrap();
            assert_eq!(s.state(), &traj.states[2]);
            s.step(&weights, 1).unwrap();
            assert_eq!(s.state(), traj.last());
            assert_eq!(s.hidden(), traj.hidden);
            let before = s.state().clone();
            s.step(&weights, 0).unwrap();
            assert_eq!(s.state(), &before);
        }
    }

    #[test]
    fn edits_overwrite_exactly_and_zero_hidden() {
        let (weights, img, a) = fixture(10, 10);
        let mut s = Session::new("s".into(), img, &a, None, IterationConfig::default()).unwrap();
        s.step(&weights, 1).unwrap();
        let mut mask = Tensor::zeros(&[1, 1, 10, 10]);
        for p in [11, 12, 55] {
            mask.data_mut()[p] = 1.0;
        }
        let values = Tensor::full(&[1, 3, 10, 10], 7.0 / 255.0);
        s.apply_edit(EditCommand::new(EditTarget::Background, mask.clone(), values)).unwrap();
        for p in [11, 12, 55] {
            for c in 0..3 {
                assert_eq!(s.state().bg.data()[c * 100 + p], 7.0 / 255.0);
            }
        }
        let h = s.hidden();
        assert!(h.h2.plane(0, 5)[55] == 0.0 && h.h1.plane(0, 5)[2 * 5 + 2] == 0.0);
        assert!(h.h2.plane(0, 5)[0] != 0.0);
        assert_eq!(s.history().len(), 1);

        let before = (s.state().clone(), s.hidden());
        s.apply_edit(EditCommand::new(EditTarget::Alpha, Tensor::zeros(&[1, 1, 10, 10]), Tensor::zeros(&[1, 1, 10, 10])))
            .unwrap();
        assert_eq!((s.state().clone(), s.hidden()), before);

        let bad = EditCommand::new(EditTarget::Alpha, mask.clone(), Tensor::full(&[1, 1, 10, 10], 2.0));
        assert!(matches!(s.apply_edit(bad), Err(Error::Validation(_))));
        let wrong = EditCommand::new(EditTarget::Alpha, Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&[1, 1, 4, 4]));
        assert!(matches!(s.apply_edit(wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn reset_restores_the_fresh_state() {
        let (weights, img, a) = fixture(8, 8);
        let fresh = Session::new("a".into(), img.clone(), &a, None, IterationConfig::default()).unwrap();
        let mut s = Session::new("b".into(), img, &a, None, IterationConfig::default()).unwrap();
        s.step(&weights, 5).unwrap();
        s.reset();
        s.reset();
        assert_eq!(s.state(), fresh.state());
        assert_eq!(s.hidden(), fresh.hidden());
        assert_eq!(s.t(), 0);
        s.step(&weights, 1).unwrap();
        let mut g = fresh;
        g.step(&weights, 1).unwrap();
        assert_eq!(s.state(), g.state());
    }

    #[test]
    fn exports() {
        let (_, img, _) = fixture(6, 6);
        let binary = Tensor::from_vec(&[1, 1, 6, 6], (0..36).map(|i| (i % 2) as f32).collect()).unwrap();
        let s = Session::new("s".into(), img.clone(), &binary, None, IterationConfig::default()).unwrap();
        let black = s.export(ExportKind::Composite, &NewBackground::default()).unwrap();
        let st = s.state();
        for c in 0..3 {
            for p in 0..36 {
                assert_eq!(black.data()[c * 36 + p], st.alpha.data()[p] * st.fg.data()[c * 36 + p]);
            }
        }
        let alpha = s.export(ExportKind::Alpha, &NewBackground::default()).unwrap();
        assert!(alpha.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // a known-everywhere binary alpha is already converged: F and B
        // carry the image where they are visible
        let back = s.export(ExportKind::Composite, &NewBackground::Image(s.state().bg.clone())).unwrap();
        assert!(back.max_abs_diff(img.tensor()).unwrap() <= 2.0 / 255.0);
    }

    #[test]
    fn store_errors_and_ids() {
        let (weights, img, a) = fixture(6, 6);
        let store = SessionStore::new(weights);
        let a1 = store.create(img.clone(), &a, None, IterationConfig::default()).unwrap();
        let a2 = store.create(img, &a, None, IterationConfig::default()).unwrap();
        assert_ne!(a1.id, a2.id);
        assert!(matches!(store.step("nope", 1), Err(Error::NotFound(_))));
        store.delete(&a1.id).unwrap();
        assert!(matches!(store.summary(&a1.id), Err(Error::NotFound(_))));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn preview_bounds() {
        let t = Tensor::full(&[1, 3, 2050, 100], 0.25);
        let p = preview(&t, 1024);
        assert!(p.dims()[2] <= 1024 && p.dims()[3] <= 1024);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
