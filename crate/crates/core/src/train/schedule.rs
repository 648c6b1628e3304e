//! Plateau-driven learning-rate decay.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleAction {
    Keep,
    Decay,
    Stop,
}

/// Decays the learning rate when `patience` consecutive evaluations pass
/// without beating the best accuracy by `min_improvement` points. The
/// evaluation that sets a new best counts as the first of the window. After
/// `max_decays` decays the next plateau signals a stop.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub patience: usize,
    pub min_improvement: f64,
    pub factor: f64,
    pub max_decays: usize,
    best: Option<f64>,
    stalled: usize,
    decays: usize,
}

impl Plateau {
    pub fn new(patience: usize, min_improvement: f64, factor: f64, max_decays: usize) -> Self {
        Self {
            patience,
            min_improvement,
            factor,
            max_decays,
            best: None,
            stalled: 0,
            decays: 0,
        }
    }

    pub fn decays(&self) -> usize {
        self.decays
    }

    /// Feeds one validation accuracy in points (0 to 100).
    pub fn observe(&mut self, accuracy: f64) -> ScheduleAction {
        match self.best {
            Some(b) if accuracy < b + self.min_improvement => self.stalled += 1,
            _ => {
                self.best = Some(accuracy);
                self.stalled = 1;
            }
        }
        if self.stalled < self.patience {
            return ScheduleAction::Keep;
        }
        self.stalled = 0;
        if self.decays == self.max_decays {
            return ScheduleAction::Stop;
        }
        self.decays += 1;
        ScheduleAction::Decay
    }

    /// Applies `action` to `lr`.
    pub fn next_lr(&self, lr: f64, action: ScheduleAction) -> f64 {
        match action {
            ScheduleAction::Decay => lr * self.factor,
            _ => lr,
        }
    }
}

/// Replays a whole history and returns the final learning rate and whether a
/// stop was signalled.
pub fn lr_schedule(history: &[f64], lr: f64, rule: &Plateau) -> (f64, bool) {
    let mut p = rule.clone();
    let mut lr = lr;
    for &a in history {
        let act = p.observe(a);
        if act == ScheduleAction::Stop {
            return (lr, true);
        }
        lr = p.next_lr(lr, act);
    }
    (lr, false)
}
