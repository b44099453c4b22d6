"""Two-phase semi-supervised training.

Phase 1 fits the generator and the energy prior on the labeled set:
posterior latents come from Langevin chains conditioned on (x, y), prior
latents from unconditioned chains, the prior ascends the posterior-minus-
prior gradient estimate, and the generator descends the BCE+Dice structure
loss at the posterior latent.

At the phase boundary each unlabeled image receives a soft pseudo-label
(the mean of J prior-sampled predictions), an entropy uncertainty map and
its complement confidence map.  Phase 2 fine-tunes the generator only, on
the confidence-weighted loss; the prior is frozen unless explicitly asked
to keep learning.

Every random draw is keyed by (purpose tag, global index), so a run is a
pure function of its config and training resumed from a checkpoint is
bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config_text
from .data import DatasetManifest, load_example, load_manifest, split_labeled
from .energy import EnergyPriorParams, grad_alpha_estimate, init_energy_prior
from .generator import GeneratorParams, forward_batch, init_generator
from .langevin import (LangevinConfig, sample_posterior_batch,
                       sample_prior_batch)
from .losses import (DICE_SMOOTH, LossValue, bce, entropy_map, phase2_loss)
from .metrics import EvalReport, confidence_quality, f_max, mae
from .rng import RngStream
from .tensor import Tensor, Tape, tsum

# RNG purpose tags (stable identifiers: training is resumable because every
# draw is a function of (seed, tag, index) only)
TAG_P1_BATCH = "p1-batch"
TAG_P1_POSTERIOR = "p1-posterior"
TAG_P1_PRIOR = "p1-prior"
TAG_P2_BATCH = "p2-batch"
TAG_P2_PRIOR = "p2-prior"
TAG_PSEUDO = "pseudo-prior"
TAG_EVAL = "eval-prior"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoLabelSet:
    image_id: str
    mean_pred: np.ndarray    # [1,H,W] in [0,1]
    uncertainty: np.ndarray  # [1,H,W] in [0,1]
    confidence: np.ndarray   # [1,H,W], 1 - uncertainty
    j_passes: int
    seed: int
    checkpoint_id: str


class Adam:
    """Adaptive-moment optimizer; moments keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1.0e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, Tensor]:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            step = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = Tensor(p.data - step)
        return out


@dataclass
class TrainState:
    gen: GeneratorParams
    prior: EnergyPriorParams
    opt_gen: Adam
    opt_ebm: Adam
    iteration: int = 0
    phase: int = 1


def init_state(cfg: ExperimentConfig, stream: RngStream) -> TrainState:
    gen = init_generator(stream, widths=cfg.width_tuple(), c_z=cfg.c_z,
                         d_z=cfg.d_z, sigma_eps_sq=cfg.sigma_eps_sq)
    prior = init_energy_prior(cfg.d_z, stream, sigma_z_sq=cfg.sigma_z_sq)
    return TrainState(gen=gen, prior=prior, opt_gen=Adam(), opt_ebm=Adam())


def decayed_lr(base: float, iteration: int, cfg: ExperimentConfig) -> float:
    return base * cfg.lr_decay ** (iteration // cfg.lr_decay_every)


def _grads_for(tape: Tape, named: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, t in named.items():
        g = tape.grad(t)
        out[name] = np.zeros_like(t.data) if g is None else g
    return out


def _structure_parts(pred: Tensor, target: Tensor):
    """(total, bce, dice) for a [B,1,H,W] batch; dice averaged per item."""
    b = pred.shape[0]
    bce_t = bce(pred, target)
    inter = tsum(pred * target, axis=(1, 2, 3))
    denom = (tsum(pred, axis=(1, 2, 3)) + tsum(target, axis=(1, 2, 3))
             + DICE_SMOOTH)
    dice_t = tsum(1.0 - (2.0 * inter + DICE_SMOOTH) / denom) * (1.0 / b)
    return bce_t + dice_t, bce_t, dice_t


def phase1_step(state: TrainState, cfg: ExperimentConfig, xs: np.ndarray,
                ys: np.ndarray, stream: RngStream) -> LossValue:
    """One labeled-set step; updates both the prior and the generator."""
    if state.phase != 1:
        raise TrainingError("phase1_step called outside phase 1")
    b = xs.shape[0]
    if b == 0:
        raise TrainingError("empty batch")
    it = state.iteration
    post_gens = [stream.substream(TAG_P1_POSTERIOR, it * cfg.batch_size + i)
                 for i in range(b)]
    prior_gens = [stream.substream(TAG_P1_PRIOR, it * cfg.batch_size + i)
                  for i in range(b)]
    z_pos = sample_posterior_batch(
        state.prior, state.gen, xs, ys,
        LangevinConfig(cfg.k_plus, cfg.delta_plus), post_gens)
    z_pri = sample_prior_batch(
        state.prior, LangevinConfig(cfg.k_minus, cfg.delta_minus), prior_gens)

    # energy prior: ascend the posterior-minus-prior estimate
    ga = grad_alpha_estimate(state.prior, Tensor(z_pos), Tensor(z_pri))
    lr_e = decayed_lr(cfg.lr_ebm, it, cfg)
    new_alpha = state.opt_ebm.step(state.prior.named(),
                                   {k: -g for k, g in ga.items()}, lr_e)

    # generator: descend the structure loss at the posterior latent
    named = state.gen.named()
    tape = Tape()
    tape.watch(*named.values())
    with tape:
        pred = forward_batch(state.gen, xs, z_pos)
        total, bce_t, dice_t = _structure_parts(pred, Tensor(ys))
    loss = LossValue(total=total.item(), bce=bce_t.item(), dice=dice_t.item())
    if not np.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at iteration {it}")
    tape.backward(total)
    gb = _grads_for(tape, named)
    lr_g = decayed_lr(cfg.lr_gen, it, cfg)
    state.gen = state.gen.with_params(state.opt_gen.step(named, gb, lr_g))
    state.prior = state.prior.with_params(new_alpha)
    state.iteration += 1
    return loss


def generate_pseudo_labels(state: TrainState, cfg: ExperimentConfig,
                           image_ids: list, xs: np.ndarray,
                           stream: RngStream, j_passes: int | None = None,
                           k_minus: int | None = None,
                           checkpoint_id: str = "") -> list:
    """Soft pseudo-labels: mean of J prior-sampled predictions per image."""
    j = cfg.j_passes if j_passes is None else j_passes
    if j < 1:
        raise TrainingError("pseudo-label generation needs J >= 1")
    k = cfg.k_minus if k_minus is None else k_minus
    lcfg = LangevinConfig(k, cfg.delta_minus)
    n = xs.shape[0]
    out = []
    bs = cfg.batch_size
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        chunk = xs[lo:hi]
        acc = np.zeros((hi - lo, 1, xs.shape[2], xs.shape[3]))
        for pass_j in range(j):
            gens = [stream.substream(TAG_PSEUDO, (lo + i) * j + pass_j)
                    for i in range(hi - lo)]
            zs = sample_prior_batch(state.prior, lcfg, gens)
            acc += forward_batch(state.gen, chunk, zs).data
        mean = acc / j
        unc = entropy_map(mean).data
        for i in range(hi - lo):
            out.append(PseudoLabelSet(
                image_id=image_ids[lo + i],
                mean_pred=mean[i], uncertainty=unc[i],
                confidence=1.0 - unc[i], j_passes=j,
                seed=stream.seed, checkpoint_id=checkpoint_id))
    return out


def phase2_step(state: TrainState, cfg: ExperimentConfig, xs: np.ndarray,
                pseudo_maps: np.ndarray, conf_maps: np.ndarray,
                stream: RngStream, k_minus: int | None = None) -> LossValue:
    """One unlabeled-set step on frozen pseudo-labels; generator only."""
    if state.phase != 2:
        raise TrainingError("phase2_step called outside phase 2")
    b = xs.shape[0]
    it = state.iteration
    k = cfg.k_minus if k_minus is None else k_minus
    gens = [stream.substream(TAG_P2_PRIOR, it * cfg.batch_size + i)
            for i in range(b)]
    zs = sample_prior_batch(state.prior, LangevinConfig(k, cfg.delta_minus),
                            gens)
    named = state.gen.named()
    tape = Tape()
    tape.watch(*named.values())
    with tape:
        pred = forward_batch(state.gen, xs, zs)
        total, loss = phase2_loss(pred, pseudo_maps, conf_maps,
                                  lambda_us=cfg.lambda_us,
                                  lambda_ue=cfg.lambda_ue,
                                  entropy_on_pseudo=cfg.entropy_on_pseudo)
    if not np.isfinite(loss.total):
        raise TrainingError(f"non-finite loss at iteration {it}")
    tape.backward(total)
    gb = _grads_for(tape, named)
    lr_g = decayed_lr(cfg.lr_gen, it, cfg)
    state.gen = state.gen.with_params(state.opt_gen.step(named, gb, lr_g))
    if cfg.joint_alpha_phase2:
        post_gens = [stream.substream(TAG_P1_POSTERIOR,
                                      it * cfg.batch_size + i)
                     for i in range(b)]
        z_pos = sample_posterior_batch(
            state.prior, state.gen, xs, pseudo_maps,
            LangevinConfig(cfg.k_plus, cfg.delta_plus), post_gens)
        ga = grad_alpha_estimate(state.prior, Tensor(z_pos), Tensor(zs))
        lr_e = decayed_lr(cfg.lr_ebm, it, cfg)
        state.prior = state.prior.with_params(state.opt_ebm.step(
            state.prior.named(), {k2: -g for k2, g in ga.items()}, lr_e))
    state.iteration += 1
    return loss


def predict_maps(state: TrainState, cfg: ExperimentConfig, xs: np.ndarray,
                 stream: RngStream, j_passes: int | None = None,
                 k_minus: int | None = None,
                 tag: str = TAG_EVAL) -> tuple[np.ndarray, np.ndarray]:
    """(mean prediction, entropy uncertainty) over J prior-sampled passes."""
    j = cfg.j_passes if j_passes is None else j_passes
    if j < 1:
        raise TrainingError("prediction needs J >= 1")
    k = cfg.k_minus if k_minus is None else k_minus
    lcfg = LangevinConfig(k, cfg.delta_minus)
    n = xs.shape[0]
    mean = np.zeros((n, 1, xs.shape[2], xs.shape[3]))
    bs = cfg.batch_size
    for lo in range(0, n, bs):
        hi = min(lo + bs, n)
        acc = np.zeros((hi - lo, 1, xs.shape[2], xs.shape[3]))
        for pass_j in range(j):
            gens = [stream.substream(tag, (lo + i) * j + pass_j)
                    for i in range(hi - lo)]
            zs = sample_prior_batch(state.prior, lcfg, gens)
            acc += forward_batch(state.gen, xs[lo:hi], zs).data
        mean[lo:hi] = acc / j
    return mean, entropy_map(mean).data


# ---------------------------------------------------------------------------
# state <-> checkpoint plumbing

def state_arrays(state: TrainState) -> dict:
    arrays = {}
    for name, t in state.gen.named().items():
        arrays[f"gen/{name}"] = t.data
    for name, t in state.prior.named().items():
        arrays[f"ebm/{name}"] = t.data
    for label, opt in (("opt_gen", state.opt_gen), ("opt_ebm", state.opt_ebm)):
        arrays[f"{label}/t"] = np.array(float(opt.t))
        for name, m in opt.m.items():
            arrays[f"{label}/m/{name}"] = m
            arrays[f"{label}/v/{name}"] = opt.v[name]
    return arrays


def save_state(path: str, state: TrainState, cfg: ExperimentConfig) -> None:
    save_checkpoint(path, cfg.to_text(), state.iteration, state.phase,
                    state_arrays(state))


def load_state(path: str) -> tuple[TrainState, ExperimentConfig]:
    config_text, iteration, phase, arrays = load_checkpoint(path)
    cfg = parse_config_text(config_text)
    stream = RngStream(cfg.train_seed)
    state = init_state(cfg, stream)
    state.gen = state.gen.with_params(
        {n: Tensor(arrays[f"gen/{n}"]) for n in state.gen.named()})
    state.prior = state.prior.with_params(
        {n: Tensor(arrays[f"ebm/{n}"]) for n in state.prior.named()})
    for label, opt in (("opt_gen", state.opt_gen), ("opt_ebm", state.opt_ebm)):
        opt.t = int(arrays[f"{label}/t"].reshape(-1)[0])
        for key, arr in arrays.items():
            if key.startswith(f"{label}/m/"):
                opt.m[key[len(label) + 3:]] = arr
            elif key.startswith(f"{label}/v/"):
                opt.v[key[len(label) + 3:]] = arr
    state.iteration = iteration
    state.phase = phase
    return state, cfg


def clone_state(state: TrainState) -> TrainState:
    clone = TrainState(gen=state.gen, prior=state.prior,
                       opt_gen=Adam(), opt_ebm=Adam(),
                       iteration=state.iteration, phase=state.phase)
    for src, dst in ((state.opt_gen, clone.opt_gen),
                     (state.opt_ebm, clone.opt_ebm)):
        dst.t = src.t
        dst.m = {k: v.copy() for k, v in src.m.items()}
        dst.v = {k: v.copy() for k, v in src.v.items()}
    return clone


# ---------------------------------------------------------------------------
# the full experiment

def _load_split(manifest: DatasetManifest, split: str
                ) -> tuple[list, np.ndarray, np.ndarray]:
    entries = manifest.by_split(split)
    ids = [e.image_id for e in entries]
    if not ids:
        return ids, np.zeros((0,)), np.zeros((0,))
    pairs = [load_example(manifest, i) for i in ids]
    xs = np.stack([p[0] for p in pairs])
    ys = np.stack([p[1] for p in pairs])
    return ids, xs, ys


def _evaluate(state: TrainState, cfg: ExperimentConfig, tag: str,
              test_xs: np.ndarray, test_ys: np.ndarray,
              pseudos: list | None, unlabeled_ys: np.ndarray | None,
              stream: RngStream, k_minus: int) -> EvalReport:
    preds, _ = predict_maps(state, cfg, test_xs, stream, k_minus=k_minus)
    fm, curve = f_max(preds, test_ys)
    m = mae(preds, test_ys)
    cq = float("nan")
    if pseudos is not None and unlabeled_ys is not None and len(pseudos):
        u = np.stack([p.uncertainty for p in pseudos])
        yhat = np.stack([p.mean_pred for p in pseudos])
        cq = confidence_quality(u, yhat, unlabeled_ys)
    return EvalReport(model_tag=tag, f_max=fm, mae=m, confidence_quality=cq,
                      seed=cfg.train_seed, curve=tuple(curve))


def write_report_csv(path: str, reports: list, cfg: ExperimentConfig) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# xi_sq=0.3 aggregation=pooled seed={cfg.train_seed} "
                f"ratio={cfg.ratio}\n")
        writer = csv.writer(f)
        writer.writerow(["model", "metric", "value"])
        for rep in reports:
            writer.writerow([rep.model_tag, "f_max", f"{rep.f_max:.17g}"])
            writer.writerow([rep.model_tag, "mae", f"{rep.mae:.17g}"])
            writer.writerow([rep.model_tag, "confidence_quality",
                             f"{rep.confidence_quality:.17g}"])


def run_experiment(cfg: ExperimentConfig, progress=print) -> dict:
    """Phase 1, pseudo-labeling, phase 2; returns reports keyed by model tag.

    Writes base/full (and optionally np) checkpoints, a per-iteration loss
    CSV and the final metric report into cfg.out_dir.
    """
    manifest = load_manifest(os.path.join(cfg.data_dir, "manifest.tsv"))
    manifest = split_labeled(manifest, cfg.ratio, cfg.split_seed)
    os.makedirs(cfg.out_dir, exist_ok=True)

    lab_ids, lab_xs, lab_ys = _load_split(manifest, "labeled")
    unl_ids, unl_xs, unl_ys = _load_split(manifest, "unlabeled")
    test_ids, test_xs, test_ys = _load_split(manifest, "test")
    if not lab_ids or not test_ids:
        raise TrainingError("dataset must contain labeled and test images")

    stream = RngStream(cfg.train_seed)
    state = init_state(cfg, stream)
    loss_rows = []

    def log_loss(it, phase, lv: LossValue):
        loss_rows.append((it, phase, lv.total, lv.bce, lv.dice, lv.entropy))
        if it % 25 == 0 or it + 1 in (cfg.phase1_iters,
                                      cfg.phase1_iters + cfg.phase2_iters):
            progress(f"iter={it} phase={phase} loss={lv.total:.6f}")

    n_lab = len(lab_ids)
    for _ in range(cfg.phase1_iters):
        it = state.iteration
        pick = stream.substream(TAG_P1_BATCH, it).integers(
            0, n_lab, size=cfg.batch_size)
        lv = phase1_step(state, cfg, lab_xs[pick], lab_ys[pick], stream)
        log_loss(it, 1, lv)

    save_state(os.path.join(cfg.out_dir, "base.ckpt"), state, cfg)
    reports = []
    pseudo_by_tag = {}

    variants = []
    if cfg.eval_np_variant and not cfg.np_mode:
        variants.append(("NP", 0, "np.ckpt"))
    variants.append(("Full", 0 if cfg.np_mode else cfg.k_minus, "full.ckpt"))

    # Base: phase-1 model, no pseudo-labels of its own beyond diagnostics
    base_pseudos = None
    if len(unl_ids):
        base_pseudos = generate_pseudo_labels(
            state, cfg, unl_ids, unl_xs, stream, checkpoint_id="base")
        pseudo_by_tag["Base"] = base_pseudos
    reports.append(_evaluate(state, cfg, "Base", test_xs, test_ys,
                             base_pseudos, unl_ys if len(unl_ids) else None,
                             stream, cfg.k_minus))

    for tag, k_pl, ckpt_name in variants:
        vstate = clone_state(state)
        vstate.phase = 2
        vstate.opt_gen = Adam()   # moments reset at the phase boundary
        vstate.opt_ebm = Adam()
        v_pseudos = None
        if len(unl_ids) and cfg.phase2_iters > 0:
            v_pseudos = (base_pseudos if k_pl == cfg.k_minus
                         else generate_pseudo_labels(
                             vstate, cfg, unl_ids, unl_xs, stream,
                             k_minus=k_pl, checkpoint_id="base"))
            yhat = np.stack([p.mean_pred for p in v_pseudos])
            conf = np.stack([p.confidence for p in v_pseudos])
            n_unl = len(unl_ids)
            for _ in range(cfg.phase2_iters):
                it = vstate.iteration
                pick = stream.substream(TAG_P2_BATCH, it).integers(
                    0, n_unl, size=cfg.batch_size)
                lv = phase2_step(vstate, cfg, unl_xs[pick], yhat[pick],
                                 conf[pick], stream, k_minus=k_pl)
                if tag == "Full":
                    log_loss(it, 2, lv)
        pseudo_by_tag[tag] = v_pseudos
        save_state(os.path.join(cfg.out_dir, ckpt_name), vstate, cfg)
        reports.append(_evaluate(vstate, cfg, tag, test_xs, test_ys,
                                 v_pseudos, unl_ys if len(unl_ids) else None,
                                 stream, k_pl))

    with open(os.path.join(cfg.out_dir, "losses.csv"), "w",
              encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "phase", "total", "bce", "dice",
                         "entropy"])
        for row in loss_rows:
            writer.writerow([row[0], row[1]] + [f"{v:.17g}" for v in row[2:]])
    write_report_csv(os.path.join(cfg.out_dir, "report.csv"), reports, cfg)
    return {rep.model_tag: rep for rep in reports} | {
        "_pseudo": pseudo_by_tag, "_unlabeled_ys": unl_ys}
