"""Alternating mapping / potential training with flow matching and the UOT objectives."""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .checkpoint import Checkpoint, init_models, load_checkpoint, save_checkpoint
from .config import OTFMConfig, TrainConfig
from .degradation import MtfSpec, upsample_lr
from .flow import interpolate, reconstruct_endpoint, sample_times, velocity_target
from .imagery import DatasetManifest, SampleTriplet, extract_patches, stack_triplets
from .losses import (CostContext, LossBreakdown, NonFiniteLossError, cost_context, flow_loss,
                     mapping_loss, potential_loss, regularized_cost)
from .networks import ema_state, ema_update

__all__ = ["TrainConfig", "TrainStepRecord", "TrainerState", "Batch", "prepare_batch",
           "train_step", "train_loop", "TrainingDivergedError", "format_log_line"]


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainStepRecord:
    step: int
    losses: LossBreakdown
    grad_norms: Tuple[float, float]
    wall_time: float
    failed: bool = False
    message: str = ""


@dataclass
class Batch:
    """Training tensors at HR resolution plus the cost context, all batched."""

    pan: torch.Tensor
    lrms: torch.Tensor
    y0: torch.Tensor
    y1: torch.Tensor
    context: CostContext

    def __len__(self):
        return self.pan.shape[0]

    def select(self, idx) -> "Batch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        ctx = self.context
        sub = CostContext(ctx.weights[idx], ctx.bias[idx],
                          None if ctx.p_hat is None else ctx.p_hat[idx],
                          None if ctx.p_low is None else ctx.p_low[idx])
        return Batch(self.pan[idx], self.lrms[idx], self.y0[idx], self.y1[idx], sub)


def prepare_batch(triplets: Sequence[SampleTriplet], cfg: OTFMConfig,
                  mtf: Optional[MtfSpec] = None) -> Batch:
    if not triplets:
        raise ValueError("batch is empty")
    if any(t.hrms_ref is None for t in triplets):
        raise ValueError("training triplets must carry hrms_ref")
    mtf = mtf or cfg.mtf_spec()
    pan, lrms, hrms = (torch.from_numpy(a) for a in stack_triplets(triplets))
    y0 = upsample_lr(lrms, cfg.data.ratio)
    ctx = cost_context(pan, y0, mtf, cfg.cost)
    return Batch(pan, lrms, y0, hrms, ctx)


class TrainerState:
    """Networks, optimisers, EMA shadows and RNG streams of one training run."""

    def __init__(self, cfg: OTFMConfig, mtf: Optional[MtfSpec] = None):
        cfg.sync()
        self.cfg = cfg
        self.mtf = mtf or cfg.mtf_spec()
        tc = cfg.train
        self.mapping, self.potential = init_models(cfg)
        self.potential.train()
        self.mapping.train()
        self.opt_mapping = torch.optim.AdamW(self.mapping.parameters(), lr=tc.lr_mapping,
                                             weight_decay=tc.weight_decay, foreach=True)
        self.opt_potential = torch.optim.AdamW(self.potential.parameters(), lr=tc.lr_potential,
                                               weight_decay=tc.weight_decay, foreach=True)
        self.ema_mapping = ema_state(self.mapping)
        self.ema_potential = ema_state(self.potential)
        self.step = 0
        self.t_generator = torch.Generator().manual_seed(tc.seed)
        self.consecutive_failures = 0
        self.endpoint_evaluations = 0

    def snapshot(self) -> dict:
        """Tensor copies of everything a step mutates before its EMA update."""
        return {
            "mapping": _clone_state(self.mapping.state_dict()),
            "potential": _clone_state(self.potential.state_dict()),
            "opt_mapping": _clone_optimizer(self.opt_mapping),
            "opt_potential": _clone_optimizer(self.opt_potential),
        }

    @torch.no_grad()
    def restore(self, snap: dict) -> None:
        self.mapping.load_state_dict(snap["mapping"])
        self.potential.load_state_dict(snap["potential"])
        for opt, key in ((self.opt_mapping, "opt_mapping"), (self.opt_potential, "opt_potential")):
            saved = snap[key]
            for group in opt.param_groups:
                for p in group["params"]:
                    if p in saved:
                        opt.state[p] = {k: v.clone() if torch.is_tensor(v) else v
                                        for k, v in saved[p].items()}
                    else:
                        opt.state.pop(p, None)

    def to_checkpoint(self, sampler_state: Optional[dict] = None) -> Checkpoint:
        rng = {"t_generator": self.t_generator.get_state()}
        if sampler_state is not None:
            rng["sampler"] = sampler_state
        return Checkpoint(
            config=self.cfg,
            step=self.step,
            mapping=ema_state(self.mapping),
            potential=ema_state(self.potential),
            ema_mapping=copy.deepcopy(self.ema_mapping),
            ema_potential=copy.deepcopy(self.ema_potential),
            optim_mapping=copy.deepcopy(self.opt_mapping.state_dict()),
            optim_potential=copy.deepcopy(self.opt_potential.state_dict()),
            rng=rng,
            extra={"consecutive_failures": self.consecutive_failures},
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, cfg: Optional[OTFMConfig] = None) -> "TrainerState":
        state = cls(cfg or ckpt.config)
        state.mapping.load_state_dict(ckpt.mapping)
        state.potential.load_state_dict(ckpt.potential)
        if ckpt.optim_mapping is not None:
            state.opt_mapping.load_state_dict(ckpt.optim_mapping)
        if ckpt.optim_potential is not None:
            state.opt_potential.load_state_dict(ckpt.optim_potential)
        state.ema_mapping = copy.deepcopy(ckpt.ema_mapping)
        state.ema_potential = copy.deepcopy(ckpt.ema_potential)
        state.step = ckpt.step
        if "t_generator" in ckpt.rng:
            state.t_generator.set_state(ckpt.rng["t_generator"])
        state.consecutive_failures = int(ckpt.extra.get("consecutive_failures", 0))
        return state


def _clone_state(sd: dict) -> dict:
    return {k: v.detach().clone() for k, v in sd.items()}


def _clone_optimizer(opt: torch.optim.Optimizer) -> dict:
    return {p: {k: v.clone() if torch.is_tensor(v) else v for k, v in st.items()}
            for p, st in opt.state.items()}


def _finite(x: torch.Tensor) -> bool:
    return bool(torch.isfinite(x).all())


def _grads_finite(params) -> bool:
    return all(p.grad is None or _finite(p.grad) for p in params)


def _params_finite(module) -> bool:
    return all(_finite(p) for p in module.parameters())


def train_step(batch: Union[Batch, Sequence[SampleTriplet]], state: TrainerState) -> TrainStepRecord:
    """One iteration: flow loss, one endpoint evaluation, a mapping update then a potential update."""
    start = time.perf_counter()
    cfg = state.cfg
    tc = cfg.train
    if not isinstance(batch, Batch):
        batch = prepare_batch(batch, cfg, state.mtf)
    if len(batch) == 0:
        raise ValueError("batch is empty")
    state.step += 1
    snap = state.snapshot()
    mapping, potential = state.mapping, state.potential
    map_params = list(mapping.parameters())
    pot_params = list(potential.parameters())

    t = sample_times(len(batch), state.t_generator, batch.y0.dtype)
    fs = interpolate(batch.y0, batch.y1, t)
    v_target = velocity_target(batch.y0, batch.y1).v
    v_hat = mapping(fs.y_t, t, batch.y0, batch.pan)
    l_flow = flow_loss(v_hat, v_target)

    zero = torch.zeros((), dtype=l_flow.dtype)
    l_map = l_pot = zero
    terms = (0.0, 0.0, 0.0)
    message = ""
    try:
        if tc.uot:
            y1_hat = reconstruct_endpoint(fs, v_hat)
            state.endpoint_evaluations += 1
            cost, cterms = regularized_cost(batch.y0, y1_hat, batch.pan, batch.lrms, cfg.cost,
                                            state.mtf, batch.context)
            v_fake = potential(y1_hat, t)
            l_map = mapping_loss(cost, v_fake)
            v_real = potential(batch.y1, t)
            # Gradients of l_pot are taken w.r.t. the potential only, so y1_hat acts as detached.
            l_pot = potential_loss(cost, v_fake, v_real, cfg.cost)
            terms = tuple(float(x.detach().mean()) for x in cterms)
        objective = tc.weight_flow * l_flow
        if tc.uot and tc.weight_mapping != 0:
            objective = objective + tc.weight_mapping * l_map
        losses = LossBreakdown(float(l_flow.detach()), float(l_map.detach()),
                               float(l_pot.detach()), terms)
        if not losses.is_finite():
            raise NonFiniteLossError(f"non-finite losses {losses}")

        state.opt_mapping.zero_grad(set_to_none=True)
        mapping_grads = torch.autograd.grad(objective, map_params, allow_unused=True,
                                            retain_graph=tc.uot)
        for p, g in zip(map_params, mapping_grads):
            p.grad = g
        if not _grads_finite(map_params):
            raise NonFiniteLossError("non-finite mapping gradients")
        gn_map = float(torch.nn.utils.clip_grad_norm_(map_params, tc.grad_clip))
        state.opt_mapping.step()

        gn_pot = 0.0
        if tc.uot:
            state.opt_potential.zero_grad(set_to_none=True)
            pot_grads = torch.autograd.grad(l_pot, pot_params, allow_unused=True)
            for p, g in zip(pot_params, pot_grads):
                p.grad = g
            if not _grads_finite(pot_params):
                raise NonFiniteLossError("non-finite potential gradients")
            gn_pot = float(torch.nn.utils.clip_grad_norm_(pot_params, tc.grad_clip))
            state.opt_potential.step()
        if not (_params_finite(mapping) and _params_finite(potential)):
            raise NonFiniteLossError("non-finite parameters after update")
    except NonFiniteLossError as exc:
        state.restore(snap)
        state.consecutive_failures += 1
        message = str(exc)
        losses = LossBreakdown(float(l_flow.detach()), float(l_map.detach()),
                               float(l_pot.detach()), terms)
        return TrainStepRecord(state.step, losses, (math.nan, math.nan),
                               time.perf_counter() - start, failed=True, message=message)

    ema_update(state.ema_mapping, mapping, tc.ema_decay)
    ema_update(state.ema_potential, potential, tc.ema_decay)
    state.consecutive_failures = 0
    return TrainStepRecord(state.step, losses, (gn_map, gn_pot), time.perf_counter() - start)


class BatchSampler:
    """Seeded epoch-wise shuffling; a batch may straddle two epochs."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("dataset is empty")
        self.n = n
        self.batch_size = batch_size
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.perm = self.rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.batch_size:
            if self.pos >= self.n:
                self.perm = self.rng.permutation(self.n)
                self.pos = 0
            take = min(self.batch_size - len(out), self.n - self.pos)
            out.extend(self.perm[self.pos:self.pos + take].tolist())
            self.pos += take
        return np.asarray(out)

    def state(self) -> dict:
        return {"bit_generator": self.rng.bit_generator.state,
                "perm": [int(i) for i in self.perm], "pos": self.pos}

    def set_state(self, s: dict) -> None:
        self.rng.bit_generator.state = s["bit_generator"]
        self.perm = np.asarray(s["perm"])
        self.pos = int(s["pos"])


def format_log_line(rec: TrainStepRecord) -> str:
    line = (f"step={rec.step} flow={rec.losses.flow:.9g} map={rec.losses.mapping:.9g} "
            f"pot={rec.losses.potential:.9g}")
    return line + (" failed=1" if rec.failed else "")


def load_training_set(manifest: DatasetManifest, cfg: OTFMConfig) -> List[SampleTriplet]:
    tc = cfg.train
    triplets = [manifest.load(i) for i in range(len(manifest))]
    if tc.patch_hr > 0:
        stride = tc.stride_hr or tc.patch_hr
        triplets = [p for tr in triplets for p in extract_patches(tr, tc.patch_hr, stride)]
    return triplets


def train_loop(manifest: Union[DatasetManifest, Sequence[SampleTriplet]], cfg: OTFMConfig,
               run_dir=None, resume_from=None,
               on_step: Optional[Callable[[TrainStepRecord], None]] = None,
               log: Optional[Callable[[str], None]] = None) -> Checkpoint:
    """Train for ``cfg.train.max_steps`` steps and return the final checkpoint.

    Periodic checkpoints go to ``run_dir/ckpt_<step>.ckpt`` and the final one to
    ``run_dir/final.ckpt``; log lines are appended to ``run_dir/log.txt``.
    """
    tc = cfg.train
    if isinstance(manifest, DatasetManifest):
        if len(manifest) == 0:
            raise ValueError("manifest is empty")
        if manifest.ratio != cfg.data.ratio or manifest.bands != cfg.data.bands:
            raise ValueError(f"manifest (ratio={manifest.ratio}, bands={manifest.bands}) does not "
                             f"match config (ratio={cfg.data.ratio}, bands={cfg.data.bands})")
        triplets = load_training_set(manifest, cfg)
    else:
        triplets = list(manifest)
    data = prepare_batch(triplets, cfg)
    sampler = BatchSampler(len(data), tc.batch_size, tc.seed)

    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        state = TrainerState.from_checkpoint(ckpt, cfg)
        if "sampler" in ckpt.rng:
            sampler.set_state(ckpt.rng["sampler"])
    else:
        state = TrainerState(cfg)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "log.txt", "a" if resume_from is not None else "w", encoding="utf-8")
    try:
        while state.step < tc.max_steps:
            rec = train_step(data.select(sampler.next()), state)
            if on_step is not None:
                on_step(rec)
            if rec.failed and state.consecutive_failures > tc.max_failed_steps:
                raise TrainingDivergedError(
                    f"{state.consecutive_failures} consecutive failed steps at step {rec.step}: "
                    f"{rec.message}")
            if tc.log_every > 0 and (rec.step % tc.log_every == 0 or rec.failed):
                line = format_log_line(rec)
                if log_fh is not None:
                    log_fh.write(line + "\n")
                    log_fh.flush()
                if log is not None:
                    log(line)
            if (run_dir is not None and tc.checkpoint_every > 0
                    and state.step % tc.checkpoint_every == 0 and state.step < tc.max_steps):
                save_checkpoint(state.to_checkpoint(sampler.state()),
                                run_dir / f"ckpt_{state.step:07d}.ckpt")
    finally:
        if log_fh is not None:
            log_fh.close()
    final = state.to_checkpoint(sampler.state())
    if run_dir is not None:
        save_checkpoint(final, run_dir / "final.ckpt")
    return final
