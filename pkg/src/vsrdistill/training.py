"""Two-stage training: distillation, then dual-head dual-domain adversarial distillation."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import ArrayInfo, Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, StageConfig, config_from_dict
from .data import ClipDataset, ImagePool, sample_pairs, sample_videos
from .discriminators import TRAINABLE_GROUPS, Discriminator, build_discriminator
from .errors import FormatError, FrozenGroupDrift, TrainingError, UsageError
from .losses import build_label_set, default_dists, disc_loss, distill_loss, gen_loss
from .student import StudentNet, build_student
from .teacher import FrozenEncoder, build_encoder, reencode_features, teacher_forward

__all__ = ["StageConfig", "AdamState", "adam_step", "lr_at", "Trainer", "run_stage1", "run_stage2"]

BETAS = (0.9, 0.999)
EPS = 1e-8


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=BETAS, eps: float = EPS) -> AdamState:
    """Bias-corrected Adam, in place on ``params``. Entries with a None gradient are left alone."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.m.setdefault(name, torch.zeros_like(p))
        v = state.v.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def lr_at(base: float, iteration: int, iterations: int) -> float:
    """Step schedule: the rate halves once, from iteration ceil(iterations / 2) on."""
    return base if iteration < math.ceil(iterations / 2) else base / 2


def clip_grads(grads: dict, max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm. ``max_norm <= 0`` only measures."""
    tensors = [g for g in grads.values() if g is not None]
    if not tensors:
        return 0.0
    total = nn.utils.get_total_norm(tensors)
    if max_norm > 0:
        coef = torch.clamp(max_norm / (total + 1e-6), max=1.0)
        for g in tensors:
            g.mul_(coef)
    return float(total)


def tensor_hash(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# trainer


def _present_logits(heads, d: Discriminator | None):
    if d is None:
        return None
    out = []
    if "detail" in d.heads:
        out.append(heads.detail_logit)
    if "consistency" in d.heads:
        out.append(heads.consistency_logit)
    return out or None


def _finite_or_raise(terms: dict, stage: int, iteration: int) -> None:
    vals = {k: torch.as_tensor(v).detach() for k, v in terms.items()}
    bad = {k: float(v) for k, v in vals.items() if not torch.isfinite(v).all()}
    if bad:
        raise TrainingError(f"non-finite loss at stage {stage} iteration {iteration}: {bad}")


class Trainer:
    """Owns every mutable parameter of a run; one ``step`` is one iteration of the active stage."""

    def __init__(self, cfg: ExperimentConfig, data: ClipDataset, stage: int, stage1: Checkpoint | None = None):
        cfg.validate()
        if stage not in (1, 2):
            raise UsageError(f"stage must be 1 or 2, got {stage}")
        if stage == 2 and stage1 is None:
            raise UsageError("stage 2 needs a stage-1 checkpoint (set stage1_checkpoint or pass --resume)")
        if not data.train_ids:
            raise TrainingError("dataset has no training clips")
        self.cfg = cfg
        self.data = data
        self.stage = stage
        self.scfg: StageConfig = cfg.stage_cfg(stage)
        self.seed = cfg.data_seed(stage)
        self.iteration = 0
        self.history: list[dict] = []
        self.extra_meta: dict = {}

        self.student: StudentNet = build_student(cfg.student, cfg.seed)
        self.encoder: FrozenEncoder = build_encoder(self.student, cfg.seed + 101)
        self.d_pixel: Discriminator | None = None
        self.d_feature: Discriminator | None = None
        if stage1 is not None:
            self._load_arrays(stage1, prefixes=("student/", "encoder/"))
        self.metric = default_dists()
        self.pool: ImagePool | None = None
        if stage == 2:
            if cfg.use_pixel_disc:
                self.d_pixel = build_discriminator(cfg.d_pixel, cfg.seed + 202)
            if cfg.use_feature_disc:
                self.d_feature = build_discriminator(cfg.d_feature, cfg.seed + 303, self.student)
            hr_size = tuple(data.clips[data.train_ids[0]].frames.shape[-2:])
            pool_size = tuple(max(a, b) for a, b in zip(cfg.image_pool_size, hr_size))
            self.pool = ImagePool(cfg.image_pool_images, pool_size, hr_size, cfg.seed + 404)

        self.adam_g = AdamState()
        self.adam_d = AdamState()
        self.frozen_hashes = self._frozen_hashes()

    # -- parameter groups

    def generator_params(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.student.named_parameters()}

    def discriminators(self) -> dict[str, Discriminator]:
        return {k: d for k, d in (("d_pixel", self.d_pixel), ("d_feature", self.d_feature)) if d is not None}

    def discriminator_params(self) -> dict[str, torch.Tensor]:
        out = {}
        for key, d in self.discriminators().items():
            for n, p in d.named_parameters():
                if n.split(".")[0] in TRAINABLE_GROUPS:
                    out[f"{key}.{n}"] = p
        return out

    def _frozen_groups(self) -> dict[str, list[torch.Tensor]]:
        groups = {"encoder": list(self.encoder.parameters())}
        for key, d in self.discriminators().items():
            groups[f"{key}.backbone"] = list(d.backbone.parameters())
        return groups

    def _frozen_hashes(self) -> dict[str, str]:
        return {k: tensor_hash(v) for k, v in self._frozen_groups().items()}

    def check_frozen(self) -> None:
        now = self._frozen_hashes()
        drift = [k for k in now if now[k] != self.frozen_hashes.get(k)]
        if drift:
            raise FrozenGroupDrift(f"frozen groups changed: {', '.join(drift)}")

    # -- one iteration

    def _lr(self, base: float) -> float:
        return lr_at(base, self.iteration, self.scfg.iterations)

    def _teacher(self, hr, lr):
        x_t = teacher_forward(self.cfg.teacher, hr, lr)
        f_t = reencode_features(x_t, self.encoder, self.student)
        return x_t, f_t

    def _generator_update(self, total, terms) -> None:
        _finite_or_raise(terms, self.stage, self.iteration)
        params = self.generator_params()
        names = [n for n, p in params.items() if p.requires_grad]
        grads = torch.autograd.grad(total, [params[n] for n in names], allow_unused=True, retain_graph=False)
        gd = {n: (g if g is not None else torch.zeros_like(params[n])) for n, g in zip(names, grads)}
        terms["grad_norm_g"] = clip_grads(gd, self.scfg.grad_clip)
        adam_step(params, gd, self.adam_g, self._lr(self.scfg.lr_generator))

    def step(self, train_generator: bool = True) -> dict:
        """One iteration. ``train_generator=False`` freezes the student and only updates the discriminators."""
        sc = self.scfg
        if self.stage == 1 and not train_generator:
            raise UsageError("stage 1 has no discriminator to train on its own")
        lr_x, hr_x = sample_pairs(self.data, self.cfg.degradation, self.seed, self.iteration, sc.batch_clips, sc.frames_per_clip)
        x_t, f_t = self._teacher(hr_x, lr_x)
        if self.stage == 1:
            out = self.student(lr_x)
            total, terms = distill_loss(out.x_student, x_t, out.f_student, f_t, self.cfg.weights, self.metric)
            self._generator_update(total, terms)
        else:
            if train_generator:
                # (i) generator step; discriminator weights only receive gradients in (iii)
                out = self.student(lr_x)
                pix = _present_logits(self.d_pixel(out.x_student), self.d_pixel) if self.d_pixel else None
                feat = _present_logits(self.d_feature(out.f_student), self.d_feature) if self.d_feature else None
                total, terms = gen_loss(out.x_student, x_t, out.f_student, f_t, pix, feat, self.cfg.weights, self.metric)
                self._generator_update(total, terms)
            else:
                with torch.no_grad():
                    out = self.student(lr_x)
                terms = {}
            # (ii) label set from this batch, student payloads detached
            if self.discriminators():
                vids = sample_videos(self.data, self.seed, self.iteration, sc.batch_clips, sc.frames_per_clip)
                singles, seqs = self.pool.sample(self.seed, self.iteration, sc.batch_clips, sc.frames_per_clip)
                samples = build_label_set(
                    out.x_student.detach(),
                    out.f_student.detach(),
                    vids,
                    singles,
                    seqs,
                    seed=[self.seed, self.iteration, 5],
                    reencode=lambda p: reencode_features(p, self.encoder, self.student),
                    curation=self.cfg.curation,
                )
                # (iii) discriminator step over the trainable groups
                d_loss = disc_loss(samples, self.d_pixel, self.d_feature, self.cfg.curation.reduction)
                terms["d_loss"] = d_loss
                _finite_or_raise({"d_loss": d_loss}, self.stage, self.iteration)
                dparams = self.discriminator_params()
                names = list(dparams)
                grads = torch.autograd.grad(d_loss, [dparams[n] for n in names], allow_unused=True)
                gd = {n: (g if g is not None else torch.zeros_like(dparams[n])) for n, g in zip(names, grads)}
                terms["grad_norm_d"] = clip_grads(gd, sc.grad_clip)
                adam_step(dparams, gd, self.adam_d, self._lr(sc.lr_discriminator))
            self.check_frozen()
        record = {"stage": self.stage, "iteration": self.iteration, "lr_g": self._lr(sc.lr_generator)}
        record.update({k: float(torch.as_tensor(v).detach()) for k, v in terms.items()})
        self.history.append(record)
        self.iteration += 1
        return record

    def run(self, out_dir: str | Path | None = None, log_path: str | Path | None = None, until: int | None = None) -> Checkpoint:
        """Iterate to ``until`` (default: the configured count), logging and checkpointing on cadence."""
        until = self.scfg.iterations if until is None else until
        out_dir = Path(out_dir) if out_dir else None
        if out_dir:
            out_dir.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            start = self.iteration
            while self.iteration < until:
                rec = self.step()
                # first, every log_every-th and last step; the first marks where a resumed run picks up
                due = rec["iteration"] in (start, until - 1) or rec["iteration"] % max(1, self.scfg.log_every) == 0
                if log and due:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                every = self.scfg.checkpoint_every
                if out_dir and every and self.iteration % every == 0 and self.iteration < until:
                    save_checkpoint(self.to_checkpoint(), out_dir / f"stage{self.stage}_iter{self.iteration:06d}.ckpt")
        finally:
            if log:
                log.close()
        ckpt = self.to_checkpoint()
        if out_dir:
            save_checkpoint(ckpt, out_dir / f"stage{self.stage}.ckpt")
        return ckpt

    # -- checkpoint state

    def _named_arrays(self):
        """(key, tensor, ArrayInfo) for every parameter-like array of the run."""
        for n, p in self.student.named_parameters():
            yield f"student/{n}", p, ArrayInfo(True, None)
        for n, p in self.encoder.named_parameters():
            yield f"encoder/{n}", p, ArrayInfo(False, "encoder")
        for key, d in self.discriminators().items():
            for n, p in d.named_parameters():
                group = n.split(".")[0]
                if group in TRAINABLE_GROUPS:
                    yield f"{key}/{n}", p, ArrayInfo(True, None)
                else:
                    yield f"{key}/{n}", p, ArrayInfo(False, f"{key}.backbone")

    def to_checkpoint(self) -> Checkpoint:
        arrays, info = {}, {}
        for key, t, inf in self._named_arrays():
            arrays[key] = t.detach().numpy().copy()
            info[key] = inf
        for tag, st in (("adam_g", self.adam_g), ("adam_d", self.adam_d)):
            arrays[f"{tag}/step"] = np.array([st.step], dtype=np.int64)
            for n in st.m:
                arrays[f"{tag}/m/{n}"] = st.m[n].numpy().copy()
                arrays[f"{tag}/v/{n}"] = st.v[n].numpy().copy()
        # sampling is keyed on (seed, iteration), so these two integers are the whole RNG state
        arrays["rng/seed"] = np.array([self.seed], dtype=np.int64)
        arrays["rng/iteration"] = np.array([self.iteration], dtype=np.int64)
        meta = {
            "format_version": 1,
            "stage": self.stage,
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "data": self.data.name,
        }
        meta.update(self.extra_meta)
        return Checkpoint(arrays, info, meta)

    def _load_arrays(self, ckpt: Checkpoint, prefixes) -> None:
        targets = {k: t for k, t, _ in self._named_arrays() if k.startswith(tuple(prefixes))}
        staged = {}
        for k, t in targets.items():
            if k not in ckpt.arrays:
                raise FormatError(f"checkpoint is missing array {k}")
            a = ckpt.arrays[k]
            if tuple(a.shape) != tuple(t.shape):
                raise FormatError(f"array {k}: checkpoint shape {a.shape} vs model {tuple(t.shape)}")
            staged[k] = torch.from_numpy(np.array(a, dtype=np.float32))
        with torch.no_grad():
            for k, t in targets.items():
                t.copy_(staged[k])

    def load_state(self, ckpt: Checkpoint) -> None:
        """Restore all parameters, optimizer moments and counters; nothing changes unless all checks pass."""
        if ckpt.stage != self.stage:
            raise UsageError(f"checkpoint is from stage {ckpt.stage}, trainer runs stage {self.stage}")
        for req in ("rng/seed", "rng/iteration"):
            if req not in ckpt.arrays:
                raise FormatError(f"checkpoint is missing {req}")
        moments = {}
        for tag, params in (("adam_g", self.generator_params()), ("adam_d", self.discriminator_params())):
            st = AdamState(step=int(ckpt.arrays.get(f"{tag}/step", np.zeros(1, np.int64))[0]))
            for n, p in params.items():
                mk, vk = f"{tag}/m/{n}", f"{tag}/v/{n}"
                if mk in ckpt.arrays:
                    if vk not in ckpt.arrays or ckpt.arrays[mk].shape != tuple(p.shape):
                        raise FormatError(f"optimizer moments for {n} are inconsistent")
                    st.m[n] = torch.from_numpy(np.array(ckpt.arrays[mk], dtype=np.float32))
                    st.v[n] = torch.from_numpy(np.array(ckpt.arrays[vk], dtype=np.float32))
            moments[tag] = st
        prefixes = ["student/", "encoder/"] + [f"{k}/" for k in self.discriminators()]
        self._load_arrays(ckpt, prefixes)
        self.adam_g, self.adam_d = moments["adam_g"], moments["adam_d"]
        self.seed = int(ckpt.arrays["rng/seed"][0])
        self.iteration = int(ckpt.arrays["rng/iteration"][0])
        self.frozen_hashes = self._frozen_hashes()

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str | Path, data: ClipDataset, cfg: ExperimentConfig | None = None) -> "Trainer":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        if cfg is None:
            if "config" not in ckpt.meta:
                raise FormatError("checkpoint carries no config echo")
            cfg = config_from_dict(ckpt.meta["config"])
        trainer = cls(cfg, data, ckpt.stage, stage1=ckpt if ckpt.stage == 2 else None)
        trainer.load_state(ckpt)
        return trainer


def student_from_checkpoint(ckpt: Checkpoint | str | Path) -> tuple[StudentNet, ExperimentConfig]:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if "config" not in ckpt.meta:
        raise FormatError("checkpoint carries no config echo")
    cfg = config_from_dict(ckpt.meta["config"])
    net = build_student(cfg.student, cfg.seed)
    staged = {}
    for n, p in net.named_parameters():
        key = f"student/{n}"
        if key not in ckpt.arrays or ckpt.arrays[key].shape != tuple(p.shape):
            raise FormatError(f"checkpoint has no usable array {key}")
        staged[n] = torch.from_numpy(np.array(ckpt.arrays[key], dtype=np.float32))
    with torch.no_grad():
        for n, p in net.named_parameters():
            p.copy_(staged[n])
    net.eval()
    return net, cfg


def run_stage1(cfg: ExperimentConfig, data: ClipDataset, out_dir=None, log_path=None) -> Checkpoint:
    return Trainer(cfg, data, 1).run(out_dir, log_path)


def run_stage2(cfg: ExperimentConfig, data: ClipDataset, stage1: Checkpoint | str | Path, out_dir=None, log_path=None) -> Checkpoint:
    if not isinstance(stage1, Checkpoint):
        stage1 = load_checkpoint(stage1)
    return Trainer(cfg, data, 2, stage1=stage1).run(out_dir, log_path)
