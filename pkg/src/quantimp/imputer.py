"""Bidirectional recurrent imputer with an ensemble of quantile heads.

Two ensemble layouts share one code path:

* ``shared_trunk`` — a single imputer per direction whose N combining heads
  are scored at N quantile levels (the head parameters are the only
  per-member weights; everything else is the shared trunk),
* ``full_ensemble`` — N complete single-head imputer pairs, member i
  trained at level q_i with its own recurrent cell (the classical
  ensemble-of-networks ablation).

Parameters live in one flat float64 vector so the optimizer, checkpoints,
and finite-difference checks can treat the model as a plain vector.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import kernels
from .data import reverse_valid
from .ensemble import resolve_levels

PARAM_GROUPS = ("W_hist", "b_hist", "W_dec", "b_dec", "W_feat", "b_feat",
                "W_comb", "b_comb", "W_in", "W_rec", "b_cell")


class ImputePassError(RuntimeError):
    """A NaN surfaced inside a directional pass."""


@dataclass(frozen=True)
class ImputerDims:
    n_features: int
    hidden: int
    n_heads: int


def param_shapes(dims):
    K, H, N = dims.n_features, dims.hidden, dims.n_heads
    return {
        "W_hist": (K, H), "b_hist": (K,),
        "W_dec": (K, K), "b_dec": (K,),
        "W_feat": (K, K), "b_feat": (K,),
        "W_comb": (N, K, 2 * K), "b_comb": (N, K),
        "W_in": (4 * H, K), "W_rec": (4 * H, H), "b_cell": (4 * H,),
    }


def layout_offsets(dims):
    shapes = param_shapes(dims)
    offs = np.zeros(len(PARAM_GROUPS) + 1, dtype=np.int64)
    for i, name in enumerate(PARAM_GROUPS):
        offs[i + 1] = offs[i] + int(np.prod(shapes[name]))
    return offs


def direction_size(dims):
    return int(layout_offsets(dims)[-1])


_FAN_IN = {"W_hist": "hidden", "W_dec": "n_features", "W_feat": "n_features",
           "W_comb": "two_k", "W_in": "n_features", "W_rec": "hidden"}


def init_direction(dims, rng):
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, in layout order."""
    shapes = param_shapes(dims)
    offs = layout_offsets(dims)
    flat = np.zeros(direction_size(dims))
    fans = {"hidden": dims.hidden, "n_features": dims.n_features,
            "two_k": 2 * dims.n_features}
    for i, name in enumerate(PARAM_GROUPS):
        if name in _FAN_IN:
            lim = 1.0 / np.sqrt(fans[_FAN_IN[name]])
            n = int(np.prod(shapes[name]))
            flat[offs[i]:offs[i + 1]] = rng.uniform(-lim, lim, size=n)
    return flat


def _check_pass(trace, direction):
    nan_step, nan_stage = trace[17], trace[18]
    if nan_step >= 0:
        stage = kernels.STAGE_NAMES.get(nan_stage, str(nan_stage))
        raise ImputePassError(
            f"NaN in {direction} pass at step {nan_step}, stage {stage}")


class EnsembleImputer:
    """Flat-parameter container plus the per-window loss/impute machinery."""

    def __init__(self, dims, quantiles, mode="shared_trunk",
                 use_decay=True, constrain_decay=True, decay_diagonal=True,
                 directions="both", flat=None, seed=0):
        quantiles = resolve_levels(quantiles)
        if mode not in ("shared_trunk", "full_ensemble"):
            raise ValueError(f"unknown ensemble_mode {mode!r}")
        if directions not in ("both", "forward", "backward"):
            raise ValueError("directions must be both|forward|backward")
        if dims.n_heads != len(quantiles):
            raise ValueError("dims.n_heads must match the number of levels")
        self.mode = mode
        self.quantiles = quantiles
        self.use_decay = bool(use_decay)
        self.constrain_decay = bool(constrain_decay)
        self.decay_diagonal = bool(decay_diagonal)
        self.directions = directions
        self.seed = int(seed)
        self.dims = dims
        if mode == "shared_trunk":
            self.member_dims = dims
            self.n_members = 1
        else:
            self.member_dims = ImputerDims(dims.n_features, dims.hidden, 1)
            self.n_members = len(quantiles)
        self._offs = layout_offsets(self.member_dims)
        self._dir_size = direction_size(self.member_dims)
        size = self.n_members * 2 * self._dir_size
        fresh = flat is None
        if flat is None:
            rng = np.random.default_rng(seed)
            flat = np.concatenate(
                [init_direction(self.member_dims, rng)
                 for _ in range(2 * self.n_members)])
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if fresh and self.decay_diagonal:
            K = self.member_dims.n_features
            offs = self._offs
            S = self._dir_size
            for d in range(2 * self.n_members):
                block = flat[d * S + offs[2]:d * S + offs[3]].reshape(K, K)
                diag = np.diag(block).copy()
                block[:] = 0.0
                np.fill_diagonal(block, diag)
        if flat.size != size:
            raise ValueError(f"parameter vector has {flat.size} entries, "
                             f"expected {size}")
        self.flat = flat

    @classmethod
    def build(cls, n_features, quantiles, mode="shared_trunk", hidden=None,
              seed=0, use_decay=True, constrain_decay=True,
              decay_diagonal=True, directions="both"):
        quantiles = resolve_levels(quantiles)
        if hidden is None:
            hidden = max(n_features, 32)
        dims = ImputerDims(n_features, hidden, len(quantiles))
        return cls(dims, quantiles, mode=mode, use_decay=use_decay,
                   constrain_decay=constrain_decay,
                   decay_diagonal=decay_diagonal, directions=directions,
                   seed=seed)

    # ------------------------------------------------------------------
    # parameter views

    def member_base(self, member_index, direction_index):
        """Flat offset of one member/direction parameter block."""
        return (member_index * 2 + direction_index) * self._dir_size

    def members(self):
        """Per-member (index, theta_fwd, theta_bwd, levels) views."""
        S = self._dir_size
        out = []
        for mi in range(self.n_members):
            lo = self.member_base(mi, 0)
            qlev = (self.quantiles if self.mode == "shared_trunk"
                    else np.ascontiguousarray(self.quantiles[mi:mi + 1]))
            out.append((mi, self.flat[lo:lo + S], self.flat[lo + S:lo + 2 * S],
                        qlev))
        return out

    def param_group_slices(self):
        """Flat index ranges per named parameter group (for reports)."""
        groups = {}
        for mi in range(self.n_members):
            mtag = "" if self.n_members == 1 else f"m{mi}/"
            for di, dtag in enumerate(("fwd", "bwd")):
                base = self.member_base(mi, di)
                for gi, name in enumerate(PARAM_GROUPS):
                    groups[f"{mtag}{dtag}/{name}"] = (
                        base + int(self._offs[gi]), base + int(self._offs[gi + 1]))
        return groups

    def decay_weight_effective(self, theta):
        """Effective (constrained, possibly diagonal) decay weight matrix
        of one direction."""
        K = self.member_dims.n_features
        raw = theta[self._offs[2]:self._offs[3]].reshape(K, K)
        if self.constrain_decay:
            eff = np.where(raw > 30.0, raw,
                           np.log1p(np.exp(np.minimum(raw, 30.0))))
        else:
            eff = raw.copy()
        if self.decay_diagonal:
            eff = np.diag(np.diag(eff))
        return eff

    # ------------------------------------------------------------------
    # loss path

    def _window_terms(self, member, win, want_grad, grad_flat, wscale,
                      lambda_consistency, aux_nll_weight, var_floor,
                      signature):
        mi, theta_f, theta_b, qlev = member
        H = self.member_dims.hidden
        N = len(qlev)
        L = win.length
        W, K = win.values.shape
        use_dec = 1 if self.use_decay else 0
        con_dec = 1 if self.constrain_decay else 0
        dia_dec = 1 if self.decay_diagonal else 0

        run_fwd = self.directions in ("both", "forward")
        run_bwd = self.directions in ("both", "backward")

        tf = tb = xr = mr = None
        if run_fwd:
            tf = kernels.direction_forward(theta_f, self._offs, win.values,
                                           win.mask, win.delta_fwd, qlev, H,
                                           use_dec, con_dec, dia_dec,
                                           var_floor)
            _check_pass(tf, "forward")
        if run_bwd:
            xr = reverse_valid(win.values, L)
            mr = reverse_valid(win.mask, L)
            tb = kernels.direction_forward(theta_b, self._offs, xr, mr,
                                           win.delta_bwd, qlev, H,
                                           use_dec, con_dec, dia_dec,
                                           var_floor)
            _check_pass(tb, "backward")

        n_obs = float(tf[16] if tf is not None else tb[16])
        comps = {"L1": 0.0, "L2": 0.0, "L_quantile": 0.0,
                 "L_consistency": 0.0, "L_nll": 0.0}
        if n_obs == 0:
            return comps, 0.0

        n1 = n_obs
        for tr in (tf, tb):
            if tr is None:
                continue
            comps["L1"] += float(np.sum(tr[12])) / n1
            comps["L2"] += float(np.sum(tr[13])) / n1
            comps["L_quantile"] += float(np.sum(tr[14])) / (N * n1)
            comps["L_nll"] += float(np.sum(tr[15])) / n1

        ext_f = np.zeros((W, K))
        ext_b = np.zeros((W, K))
        if run_fwd and run_bwd:
            vb_re = reverse_valid(tb[8], L)
            diff = tf[8][:L] - vb_re[:L]
            comps["L_consistency"] = float(np.mean(np.abs(diff)))
            if want_grad and lambda_consistency != 0.0:
                g = lambda_consistency * wscale * np.sign(diff) / (L * K)
                ext_f[:L] = g
                ext_b[:L] = -g[::-1]
            if signature is not None:
                signature.append(np.sign(diff).astype(np.int8).ravel())

        if signature is not None:
            for tr, xx, mm in ((tf, win.values, win.mask), (tb, xr, mr)):
                if tr is None:
                    continue
                signature.append(
                    (np.sign(tr[0] - xx) * mm).astype(np.int8).ravel())
                signature.append(
                    (np.sign(tr[4] - xx) * mm).astype(np.int8).ravel())
                branch = (xx[:, None, :] >= tr[6]).astype(np.int8)
                signature.append(
                    (branch * mm[:, None, :].astype(np.int8)).ravel())
                if self.use_decay:
                    signature.append((tr[2] > 0.0).astype(np.int8).ravel())
                if aux_nll_weight != 0.0:
                    disp = tr[6] - tr[7][:, None, :]
                    s2 = np.mean(disp * disp, axis=1)
                    signature.append(((s2 <= var_floor) * mm)
                                     .astype(np.int8).ravel())

        if want_grad:
            cL1 = wscale / n1
            cLq = wscale / (N * n1)
            cN = wscale * aux_nll_weight / n1
            S = self._dir_size
            for di, (tr, theta, delta, ext, xx, mm) in enumerate((
                    (tf, theta_f, win.delta_fwd, ext_f, win.values, win.mask),
                    (tb, theta_b, win.delta_bwd, ext_b, xr, mr))):
                if tr is None:
                    continue
                base = self.member_base(mi, di)
                gview = grad_flat[base:base + S]
                kernels.direction_backward(
                    theta, gview, self._offs, xx, mm, delta, qlev, H,
                    use_dec, con_dec, dia_dec,
                    tr[0], tr[1], tr[2], tr[3], tr[4], tr[5], tr[6], tr[7],
                    tr[8], tr[9], tr[10], tr[11],
                    ext, cL1, cL1, cLq, cN, var_floor)
        return comps, n_obs

    def loss(self, windows, lambda_consistency=0.1, aux_nll_weight=0.0,
             var_floor=1e-6, want_grad=False, want_signature=False):
        """Mean loss components over non-empty windows.

        Returns ``(components, grad, signature)``; ``grad`` is the exact
        gradient of ``components['total']`` w.r.t. the flat parameter
        vector (None unless requested), ``signature`` a concatenated int8
        record of every nondifferentiable branch taken (None unless
        requested; used by the finite-difference checker to skip kinks).
        """
        grad = np.zeros_like(self.flat) if want_grad else None
        signature = [] if want_signature else None
        nonempty = [w for w in windows if float(np.sum(w.mask)) > 0.0]
        totals = {"L1": 0.0, "L2": 0.0, "L_quantile": 0.0,
                  "L_consistency": 0.0, "L_nll": 0.0}
        if not nonempty:
            comps = dict(totals)
            comps.update(total=0.0, n_obs=0.0, empty_support=True)
            sig = np.zeros(0, dtype=np.int8) if want_signature else None
            return comps, grad, sig
        wscale = 1.0 / len(nonempty)
        n_obs_total = 0.0
        for win in nonempty:
            for member in self.members():
                comps, n_obs = self._window_terms(
                    member, win, want_grad, grad, wscale,
                    lambda_consistency, aux_nll_weight, var_floor, signature)
                for key in totals:
                    totals[key] += comps[key] * wscale
            n_obs_total += n_obs
        total = (totals["L1"] + totals["L2"] + totals["L_quantile"]
                 + lambda_consistency * totals["L_consistency"]
                 + aux_nll_weight * totals["L_nll"])
        out = dict(totals)
        out.update(total=total, n_obs=n_obs_total, empty_support=False)
        sig = None
        if want_signature:
            sig = (np.concatenate(signature) if signature
                   else np.zeros(0, dtype=np.int8))
        return out, grad, sig

    # ------------------------------------------------------------------
    # inference

    def impute_window(self, win, var_floor=1e-6):
        """Per-head imputations for one window, directions averaged.

        Returns ``(heads, mean)`` with shapes (N, W, K) and (W, K) in the
        model's (normalized) units. Observed cells pass through
        bit-identically at every head and in the mean.
        """
        H = self.member_dims.hidden
        L = win.length
        use_dec = 1 if self.use_decay else 0
        con_dec = 1 if self.constrain_decay else 0
        dia_dec = 1 if self.decay_diagonal else 0
        m = win.mask[None, :, :]
        x = win.values[None, :, :]
        head_list = []
        for mi, theta_f, theta_b, qlev in self.members():
            per_dir = []
            if self.directions in ("both", "forward"):
                tf = kernels.direction_forward(
                    theta_f, self._offs, win.values, win.mask, win.delta_fwd,
                    qlev, H, use_dec, con_dec, dia_dec, var_floor)
                _check_pass(tf, "forward")
                per_dir.append(np.transpose(tf[6], (1, 0, 2)))
            if self.directions in ("both", "backward"):
                xr = reverse_valid(win.values, L)
                mr = reverse_valid(win.mask, L)
                tb = kernels.direction_forward(
                    theta_b, self._offs, xr, mr, win.delta_bwd,
                    qlev, H, use_dec, con_dec, dia_dec, var_floor)
                _check_pass(tb, "backward")
                per_dir.append(np.stack(
                    [reverse_valid(tb[6][:, i, :], L)
                     for i in range(len(qlev))]))
            reps = [m * x + (1.0 - m) * vh for vh in per_dir]
            combined = reps[0] if len(reps) == 1 else 0.5 * (reps[0] + reps[1])
            head_list.append(combined)
        heads = np.concatenate(head_list, axis=0)
        mean = win.mask * win.values \
            + (1.0 - win.mask) * np.mean(heads, axis=0)
        return heads, mean


# ----------------------------------------------------------------------
# spec-level single-direction pass (reference surface for tests/tools)

@dataclass
class DirectionalPass:
    x_hist: np.ndarray          # (T, K)
    x_complement: np.ndarray    # (T, K)
    gamma: np.ndarray           # (T, K)
    z_feat: np.ndarray          # (T, K)
    beta: np.ndarray            # (T, N, K)
    v_hat: np.ndarray           # (T, N, K), pre-replacement estimates
    v_heads: np.ndarray         # (T, N, K), observed cells passed through
    v_mean: np.ndarray          # (T, K)
    hidden: np.ndarray          # (T, H)
    cell: np.ndarray            # (T, H)
    step_l1: np.ndarray         # raw per-step sums
    step_l2: np.ndarray
    step_lq: np.ndarray
    step_nll: np.ndarray
    n_obs: float

    @property
    def loss_components(self):
        n1 = max(self.n_obs, 1.0)
        N = self.v_hat.shape[1]
        return {"L1": float(np.sum(self.step_l1)) / n1,
                "L2": float(np.sum(self.step_l2)) / n1,
                "L_quantile": float(np.sum(self.step_lq)) / (N * n1)}


def directional_pass(theta, dims, quantiles, values, mask, delta,
                     use_decay=True, constrain_decay=True,
                     decay_diagonal=True, var_floor=1e-6):
    """One direction over one window; raises on any NaN intermediate."""
    quantiles = resolve_levels(quantiles)
    offs = layout_offsets(dims)
    tr = kernels.direction_forward(
        np.ascontiguousarray(theta, dtype=np.float64), offs,
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(mask, dtype=np.float64),
        np.ascontiguousarray(delta, dtype=np.float64),
        quantiles, dims.hidden,
        1 if use_decay else 0, 1 if constrain_decay else 0,
        1 if decay_diagonal else 0, var_floor)
    _check_pass(tr, "directional")
    m = mask[:, None, :]
    v_heads = m * values[:, None, :] + (1.0 - m) * tr[6]
    return DirectionalPass(
        x_hist=tr[0], x_complement=tr[1], gamma=tr[3], z_feat=tr[4],
        beta=tr[5], v_hat=tr[6], v_heads=v_heads, v_mean=tr[8],
        hidden=tr[11], cell=tr[10], step_l1=tr[12], step_l2=tr[13],
        step_lq=tr[14], step_nll=tr[15], n_obs=float(tr[16]))


def bidirectional_impute(model, window, lambda_consistency=0.1,
                         aux_nll_weight=0.0, var_floor=1e-6):
    """Both directions over one window: per-head imputations, their mean,
    and the combined loss components (direction sums plus the consistency
    penalty)."""
    comps, _, _ = model.loss([window], lambda_consistency=lambda_consistency,
                             aux_nll_weight=aux_nll_weight,
                             var_floor=var_floor)
    heads, mean = model.impute_window(window, var_floor=var_floor)
    return heads, mean, comps


# ----------------------------------------------------------------------
# checkpointing

CHECKPOINT_FORMAT = 1


def save_checkpoint(path, model, stats, meta=None):
    """Self-describing .npz: flat params, levels, normalization stats.

    Written atomically (temp file + rename); round-trips bit-exactly.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "mode": model.mode,
        "n_features": model.dims.n_features,
        "hidden": model.dims.hidden,
        "n_heads": model.dims.n_heads,
        "use_decay": model.use_decay,
        "constrain_decay": model.constrain_decay,
        "decay_diagonal": model.decay_diagonal,
        "directions": model.directions,
        "seed": model.seed,
        "param_groups": list(PARAM_GROUPS),
        "meta": meta or {},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh,
                 flat=model.flat,
                 quantiles=model.quantiles,
                 norm_mean=stats.mean,
                 norm_std=stats.std,
                 header=np.frombuffer(
                     json.dumps(header, sort_keys=True).encode(),
                     dtype=np.uint8))
    os.replace(tmp, path)


def load_checkpoint(path):
    from .data import NormStats
    with np.load(path) as z:
        header = json.loads(bytes(z["header"].tobytes()).decode())
        if header["format"] != CHECKPOINT_FORMAT:
            raise ValueError(
                f"unsupported checkpoint format {header['format']}")
        dims = ImputerDims(header["n_features"], header["hidden"],
                           header["n_heads"])
        model = EnsembleImputer(
            dims, z["quantiles"], mode=header["mode"],
            use_decay=header["use_decay"],
            constrain_decay=header["constrain_decay"],
            decay_diagonal=header.get("decay_diagonal", True),
            directions=header["directions"], flat=z["flat"].copy(),
            seed=header["seed"])
        stats = NormStats(mean=z["norm_mean"].copy(), std=z["norm_std"].copy())
    return model, stats, header["meta"]
