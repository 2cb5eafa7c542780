"""Joint optimization of the imputer losses with the standard protocol.

The objective per window is the sum of the masked history-regression MAE,
the masked cross-feature MAE, the masked per-head quantile loss, an
optional forward/backward consistency penalty, and an optional
heteroscedastic NLL term (weight 0 by default). Training is bit-for-bit
deterministic for a fixed seed: windows are shuffled with a seeded
generator and gradients accumulate in a fixed sequential order.
"""

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import build_model_inputs, fit_normalizer
from .ensemble import resolve_levels
from .imputer import EnsembleImputer


class TrainingDiverged(RuntimeError):
    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 200
    quantile_preset: object = "Q1"      # preset name or explicit levels
    ensemble_mode: str = "shared_trunk"
    lambda_consistency: float = 0.1
    aux_nll_weight: float = 0.0
    seed: int = 0
    hidden: int = 0                     # 0 -> max(n_features, 32)
    window_length: int = 48
    gradient_clip: float = 5.0
    var_floor: float = 1e-6
    std_floor: float = 1e-5
    use_decay: bool = True
    constrain_decay: bool = True
    decay_diagonal: bool = True
    directions: str = "both"
    variance_mode: str = "dispersion"
    early_stop_patience: int = 0        # 0 disables early stopping
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")
        if self.lambda_consistency < 0 or self.aux_nll_weight < 0:
            raise ValueError("loss weights must be nonnegative")
        resolve_levels(self.quantile_preset)

    @property
    def quantiles(self):
        return resolve_levels(self.quantile_preset)

    def to_dict(self):
        d = dataclasses.asdict(self)
        if not isinstance(d["quantile_preset"], str):
            d["quantile_preset"] = list(np.asarray(d["quantile_preset"],
                                                   dtype=float))
        return d


def config_hash(payload):
    """Short stable hash of any JSON-serializable config payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


class Adam:
    """Plain Adam on a flat parameter vector (beta1=0.9, beta2=0.999)."""

    def __init__(self, n_params, learning_rate, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.lr = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_gradient(grad, max_norm):
    """Scale ``grad`` in place to a global norm of at most ``max_norm``."""
    if max_norm <= 0:
        return grad
    norm = float(np.sqrt(np.sum(grad * grad)))
    if norm > max_norm:
        grad *= max_norm / norm
    return grad


def total_loss(model, windows, config):
    """Loss components of ``model`` on ``windows`` under ``config``."""
    comps, _, _ = model.loss(
        windows, lambda_consistency=config.lambda_consistency,
        aux_nll_weight=config.aux_nll_weight, var_floor=config.var_floor)
    return comps


@dataclass
class TrainResult:
    model: EnsembleImputer
    stats: object
    trajectory: list
    wall_ms: int
    config: dict
    config_hash: str
    stopped_early: bool = False


def build_model_for(dataset, config):
    hidden = config.hidden if config.hidden > 0 else None
    return EnsembleImputer.build(
        dataset.n_features, config.quantile_preset,
        mode=config.ensemble_mode, hidden=hidden, seed=config.seed,
        use_decay=config.use_decay, constrain_decay=config.constrain_decay,
        decay_diagonal=config.decay_diagonal, directions=config.directions)


def train(dataset, split, config, on_epoch=None):
    """Fit the imputer on the train-visible cells of ``dataset``.

    Evaluation cells are invisible end to end: their mask bits are 0 in the
    model input and their values are zeroed before normalization, so they
    influence neither the normalizer nor any gradient. ``on_epoch`` is an
    optional ``(epoch, model, stats)`` callback (periodic checkpoints).
    """
    t0 = time.perf_counter()
    visible = split.train_mask
    stats_ds = dataclasses.replace(
        dataset, values=np.where(visible > 0, dataset.values, 0.0),
        mask=visible)
    stats = fit_normalizer(stats_ds, std_floor=config.std_floor)
    windows = build_model_inputs(dataset.values, visible, dataset.timestamps,
                                 stats, config.window_length)

    holdout = None
    if config.early_stop_patience > 0:
        holdout = _carve_holdout(windows, config)

    model = build_model_for(dataset, config)
    adam = Adam(model.flat.size, config.learning_rate)
    trajectory = []
    best = None
    stopped = False

    for epoch in range(config.epochs):
        e0 = time.perf_counter()
        order = np.arange(len(windows))
        np.random.default_rng([config.seed, epoch]).shuffle(order)
        sums = {"L1": 0.0, "L2": 0.0, "L_quantile": 0.0,
                "L_consistency": 0.0, "L_nll": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), config.batch_size):
            batch = [windows[j] for j in order[lo:lo + config.batch_size]]
            comps, grad, _ = model.loss(
                batch, lambda_consistency=config.lambda_consistency,
                aux_nll_weight=config.aux_nll_weight,
                var_floor=config.var_floor, want_grad=True)
            if not np.isfinite(comps["total"]) \
                    or comps["total"] > config.divergence_limit:
                raise TrainingDiverged(
                    f"loss diverged at epoch {epoch}: {comps['total']}",
                    trajectory)
            clip_gradient(grad, config.gradient_clip)
            adam.step(model.flat, grad)
            for key in sums:
                sums[key] += comps[key]
            n_batches += 1
        entry = {"epoch": epoch}
        entry.update({k: v / max(n_batches, 1) for k, v in sums.items()})
        entry["wall_ms"] = int((time.perf_counter() - e0) * 1000)

        if holdout is not None:
            val = _holdout_mae(model, holdout)
            entry["val_mae"] = val
            if best is None or val < best[0] - 1e-12:
                best = (val, model.flat.copy(), epoch)
            elif epoch - best[2] >= config.early_stop_patience:
                trajectory.append(entry)
                stopped = True
                break
        trajectory.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, model, stats)

    if stopped and best is not None:
        model.flat[:] = best[1]

    payload = config.to_dict()
    return TrainResult(
        model=model, stats=stats, trajectory=trajectory,
        wall_ms=int((time.perf_counter() - t0) * 1000),
        config=payload, config_hash=config_hash(payload),
        stopped_early=stopped)


def _carve_holdout(windows, config):
    """Hide 10% of train-visible cells from the model for early stopping."""
    rng = np.random.default_rng([config.seed, 0xE5])
    held = []
    for win in windows:
        hide = (rng.random(win.mask.shape) < 0.1) & (win.mask > 0)
        truth = win.values.copy()
        win.values[hide] = 0.0
        win.mask[hide] = 0.0
        held.append((win, hide.astype(float), truth))
    return held


def _holdout_mae(model, holdout):
    num = den = 0.0
    for win, hide, truth in holdout:
        _, mean = model.impute_window(win)
        num += float(np.sum(np.abs(mean - truth) * hide))
        den += float(np.sum(hide))
    return num / max(den, 1.0)


# ----------------------------------------------------------------------
# finite-difference gradient verification

@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    fd_step: float
    groups: dict = field(default_factory=dict)
    n_checked: int = 0
    n_kink_skipped: int = 0
    n_inactive_skipped: int = 0

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_err < self.tolerance \
            or self.n_checked == 0

    def summary(self):
        lines = [f"grad check: max rel err {self.max_rel_err:.3e} "
                 f"(tol {self.tolerance:.0e}), {self.n_checked} checked, "
                 f"{self.n_kink_skipped} kink-skipped, "
                 f"{self.n_inactive_skipped} inactive"]
        for name, meta in sorted(self.groups.items()):
            lines.append(f"  {name:24s} max {meta['max_rel_err']:.3e} "
                         f"({meta['checked']} checked)")
        return "\n".join(lines)


def grad_check(model, windows, config, fd_step=1e-5, tolerance=1e-4,
               activity_threshold=1e-8):
    """Compare analytic gradients against central finite differences.

    Coordinates whose +-h evaluations land on different sides of any
    nondifferentiable branch (pinball/MAE kinks, the decay ReLU, the NLL
    variance floor) are excluded, as are coordinates where both gradients
    sit below the activity threshold.
    """
    kw = dict(lambda_consistency=config.lambda_consistency,
              aux_nll_weight=config.aux_nll_weight,
              var_floor=config.var_floor)
    comps, grad, sig0 = model.loss(windows, want_grad=True,
                                   want_signature=True, **kw)
    report = GradCheckReport(max_rel_err=0.0, tolerance=tolerance,
                             fd_step=fd_step)
    flat = model.flat
    for name, (lo, hi) in model.param_group_slices().items():
        gmax = 0.0
        checked = 0
        for j in range(lo, hi):
            orig = flat[j]
            flat[j] = orig + fd_step
            cp, _, sp = model.loss(windows, want_signature=True, **kw)
            flat[j] = orig - fd_step
            cm, _, sm = model.loss(windows, want_signature=True, **kw)
            flat[j] = orig
            if not (np.array_equal(sp, sm) and np.array_equal(sp, sig0)):
                report.n_kink_skipped += 1
                continue
            fd = (cp["total"] - cm["total"]) / (2.0 * fd_step)
            if abs(fd) < activity_threshold and abs(grad[j]) < activity_threshold:
                report.n_inactive_skipped += 1
                continue
            rel = abs(fd - grad[j]) / max(abs(fd), abs(grad[j]))
            gmax = max(gmax, rel)
            checked += 1
        report.groups[name] = {"max_rel_err": gmax, "checked": checked}
        report.max_rel_err = max(report.max_rel_err, gmax)
        report.n_checked += checked
    return report
