/// Learning-rate and stopping rules driven by per-epoch validation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// A loss counts as an improvement only if it beats the best by more
    /// than this.
    pub tolerance: f64,
}

/// Linear ramp from 0 to `base_lr` over `warmup_epochs`; `epoch` may be
/// fractional.
pub fn warmup_lr(base_lr: f64, epoch: f64, warmup_epochs: f64) -> f64 {
    if warmup_epochs <= 0.0 || epoch >= warmup_epochs {
        base_lr
    } else {
        base_lr * (epoch.max(0.0) / warmup_epochs)
    }
}

/// Plateau decay state. Fed only with post-warmup validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Self { lr, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Records one epoch. After `patience` consecutive epochs without
    /// improvement the rate is multiplied by `factor` and the count restarts.
    pub fn observe(&mut self, loss: f64, cfg: &ScheduleConfig) {
        if loss < self.best - cfg.tolerance {
            self.best = loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= cfg.plateau_patience {
                self.lr *= cfg.plateau_factor;
                self.bad_epochs = 0;
            }
        }
    }
}

/// Learning rate at the start of the epoch following `history` (one
/// validation loss per completed epoch). Warmup epochs do not feed the
/// plateau rule.
pub fn lr_schedule(history: &[f64], cfg: &ScheduleConfig) -> f64 {
    let epoch = history.len() as f64;
    if epoch < cfg.warmup_epochs {
        return warmup_lr(cfg.base_lr, epoch, cfg.warmup_epochs);
    }
    let skip = cfg.warmup_epochs.ceil() as usize;
    let mut p = Plateau::new(cfg.base_lr);
    for &l in history.iter().skip(skip) {
        p.observe(l, cfg);
    }
    p.lr
}

/// Epochs since the best (strictly improved) validation loss.
pub fn epochs_since_best(history: &[f64], tolerance: f64) -> usize {
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for (i, &l) in history.iter().enumerate() {
        if l < best - tolerance {
            best = l;
            best_at = i;
        }
    }
    history.len().saturating_sub(best_at + 1)
}

/// True once the best validation loss is more than `patience` epochs old.
pub fn early_stop(history: &[f64], patience: usize, tolerance: f64) -> bool {
    !history.is_empty() && epochs_since_best(history, tolerance) > patience
}
