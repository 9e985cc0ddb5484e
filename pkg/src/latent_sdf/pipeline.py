"""Training phases, latent extraction, generation and CONS filtering.

Phases run separately: the modulation model first, then a denoiser on the
saved posterior-mean latents, then a short joint fine-tune.  Every phase is a
pure function of its config (including the seed) and its inputs.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import serialization
from .autodiff import GradientTape, NonFiniteError, Tensor, no_tape
from .diffusion import (Denoiser, DenoiserConfig, denoise, diffusion_loss, drop_conditions,
                        make_schedule, q_sample, sample)
from .geometry import (ShapeSpec, make_shape_set, partial_from_full, read_xyz, sample_queries,
                       sample_surface, write_xyz)
from .geometry.meshing import Mesh
from .metrics import cons as cons_metric
from .modulation import (ModulationConfig, ModulationModel, modulation_loss, reconstruct_mesh)
from .nn import Adam

log = logging.getLogger(__name__)

PHASES = ("modulation", "diffusion", "finetune")


@dataclass
class TrainConfig:
    phase: str = "modulation"
    seed: int = 0
    data_dir: str | None = None
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    lr_half_life: int | None = None
    log_every: int = 50
    # modulation
    n_points: int = 512
    n_queries: int = 1024
    near_fraction: float = 0.7
    noise_std: float = 0.05
    kl_weight: float = 1e-5
    prior_std: float = 0.25
    latent_dim: int = 64
    feature_dim: int = 128
    sdf_width: int = 128
    sdf_hidden: int = 8
    activation: str = "relu"
    target_l1: float | None = None
    # diffusion
    T: int = 500
    beta_1: float = 1e-4
    beta_T: float = 0.02
    model_dim: int = 128
    tokens: int = 4
    blocks: int = 6
    heads: int = 1
    conditional: bool = True
    cond_mode: str = "cross_attention"
    dropout_p: float = 0.8
    partial_sample: int = 128
    partial_keep: int = 64
    # fine-tune
    freeze_modulation: bool = False
    freeze_diffusion: bool = False
    detach_target: bool = True
    t_max: int | None = None
    # generation
    omega: float = 0.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.seed is None:
            raise ValueError("a seed is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def modulation_config(self) -> ModulationConfig:
        return ModulationConfig(feature_dim=self.feature_dim, latent_dim=self.latent_dim,
                                sdf_width=self.sdf_width, sdf_hidden=self.sdf_hidden,
                                activation=self.activation)

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(latent_dim=self.latent_dim, model_dim=self.model_dim,
                              tokens=self.tokens, blocks=self.blocks, heads=self.heads,
                              conditional=self.conditional, cond_dim=self.feature_dim,
                              cond_mode=self.cond_mode)

    def schedule(self):
        return make_schedule(self.T, self.beta_1, self.beta_T)

    def lr_at(self, step: int) -> float:
        if not self.lr_half_life:
            return self.lr
        return self.lr * 0.5 ** (step / self.lr_half_life)


class TrainingError(RuntimeError):
    """Training hit a non-finite value; ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: "Checkpoint | None", step: int | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = checkpoint.step if checkpoint is not None else step


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    phase: str
    step: int
    config: dict
    model_config: dict
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    loss_log: list = field(default_factory=list)

    def save(self, path) -> None:
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"optim/{k}": v for k, v in self.optim.items()})
        meta = {"phase": self.phase, "step": self.step, "config": self.config,
                "model_config": self.model_config, "rng_state": self.rng_state,
                "loss_log": self.loss_log}
        serialization.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        tensors, meta = serialization.load_tensors(path)
        params = {k[6:]: v for k, v in tensors.items() if k.startswith("param/")}
        optim = {k[6:]: v for k, v in tensors.items() if k.startswith("optim/")}
        return cls(meta["phase"], meta["step"], meta["config"], meta["model_config"], params,
                   optim, meta.get("rng_state"), meta.get("loss_log", []))


def load_modulation(ckpt: Checkpoint) -> ModulationModel:
    model = ModulationModel(ModulationConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.params)
    return model


def load_denoiser(ckpt: Checkpoint) -> Denoiser:
    model = Denoiser(DenoiserConfig.from_dict(ckpt.model_config))
    model.load_state_dict(ckpt.params)
    return model


def _checkpoint(phase, step, config, model, model_cfg, opt, rng, loss_log) -> Checkpoint:
    optim = opt.state_dict() if opt is not None else {}
    return Checkpoint(phase, step, config.to_dict(), model_cfg.to_dict(), model.state_dict(),
                      optim,
                      rng.bit_generator.state if rng is not None else None, list(loss_log))


def _restore(resume: Checkpoint | None, model, opt, rng):
    if resume is None:
        return 0, []
    model.load_state_dict(resume.params)
    opt.load_state_dict(resume.optim, resume.step)
    rng.bit_generator.state = resume.rng_state
    return resume.step, list(resume.loss_log)


# -- dataset ----------------------------------------------------------------------

@dataclass
class ShapeRecord:
    name: str
    category: str
    spec: ShapeSpec
    cloud: np.ndarray  # surface samples, (N, 3)


def make_records(n: int, rng: np.random.Generator, n_points: int = 2048,
                 prefix: str = "shape") -> list[ShapeRecord]:
    shapes = make_shape_set(n, rng)
    return [ShapeRecord(f"{prefix}_{i:04d}", cat, spec, sample_surface(spec, n_points, rng))
            for i, (cat, spec) in enumerate(shapes)]


def write_dataset(out_dir, n_train: int, n_test: int, seed: int, n_points: int = 2048) -> dict:
    """Procedural dataset on disk: ``manifest.json`` plus per-shape JSON spec and XYZ cloud."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    manifest = {"seed": seed, "n_points": n_points, "splits": {}}
    for split, n in (("train", n_train), ("test", n_test)):
        (out / split).mkdir(parents=True, exist_ok=True)
        entries = []
        for rec in make_records(n, rng, n_points, prefix=split):
            spec_path = f"{split}/{rec.name}.json"
            cloud_path = f"{split}/{rec.name}.xyz"
            (out / spec_path).write_text(rec.spec.to_json() + "\n")
            write_xyz(out / cloud_path, rec.cloud)
            entries.append({"name": rec.name, "category": rec.category, "spec": spec_path,
                            "cloud": cloud_path})
        manifest["splits"][split] = entries
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(data_dir, split: str = "train") -> list[ShapeRecord]:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {root / 'manifest.json'}")
    return [ShapeRecord(e["name"], e["category"],
                        ShapeSpec.from_json((root / e["spec"]).read_text()),
                        read_xyz(root / e["cloud"]))
            for e in manifest["splits"][split]]


def _modulation_batch(records, config: TrainConfig, rng):
    idx = rng.choice(len(records), size=min(config.batch_size, len(records)), replace=False)
    clouds, queries, gts = [], [], []
    for i in idx:
        rec = records[i]
        clouds.append(rec.cloud[rng.choice(len(rec.cloud), config.n_points,
                                           replace=len(rec.cloud) < config.n_points)])
        q = sample_queries(rec.spec, config.n_queries, config.near_fraction, config.noise_std,
                           rng, surface=rec.cloud)
        queries.append(q.points)
        gts.append(q.sdf)
    return idx, np.stack(clouds), np.stack(queries), np.stack(gts)


def _partials(records, idx, config: TrainConfig, rng) -> np.ndarray:
    return np.stack([partial_from_full(records[i].cloud, rng, config.partial_sample,
                                       config.partial_keep) for i in idx])


def _log_row(loss_log: list, step: int, values: dict, log_path) -> None:
    row = {"step": step, **{k: float(v) for k, v in values.items()}}
    loss_log.append(row)
    log.info("step %d %s", step, " ".join(f"{k}={v:.6g}" for k, v in values.items()))
    if log_path is not None:
        path = Path(log_path)
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write(",".join(row) + "\n")
            fh.write(",".join(repr(v) for v in row.values()) + "\n")


# -- phase 1: modulation ------------------------------------------------------------

def train_modulation(config: TrainConfig, records: Sequence[ShapeRecord],
                     resume: Checkpoint | None = None, stop_after: int | None = None,
                     log_path=None) -> Checkpoint:
    """Fit encoder, VAE and SDF decoder on ``records``."""
    rng = np.random.default_rng(config.seed)
    mcfg = config.modulation_config()
    model = ModulationModel(mcfg, seed=config.seed)
    opt = Adam(model.named_parameters(), lr=config.lr)
    start, loss_log = _restore(resume, model, opt, rng)
    end = config.steps if stop_after is None else min(stop_after, config.steps)
    for step in range(start, end):
        # adam checks gradients before updating, so a failed step leaves the
        # weights untouched; only the rng has to be rewound for a resumable checkpoint
        step_rng = rng.bit_generator.state
        _, clouds, queries, gts = _modulation_batch(records, config, rng)
        opt.state.lr = config.lr_at(step)
        try:
            with GradientTape() as tape:
                loss = modulation_loss(model, clouds, queries, gts, config.kl_weight, rng,
                                       config.prior_std)
            tape.backward(loss.total)
            opt.step()
        except NonFiniteError as exc:
            rng.bit_generator.state = step_rng
            good = _checkpoint("modulation", step, config, model, mcfg, opt, rng, loss_log)
            raise TrainingError(f"modulation step {step}: {exc}", good) from exc
        opt.zero_grad()
        if step % config.log_every == 0 or step == config.steps - 1:
            _log_row(loss_log, step, {"loss": loss.total.item(), "l1": loss.l1.item(),
                                      "kl": loss.kl.item()}, log_path)
    final = _checkpoint("modulation", end, config, model, mcfg, opt, rng, loss_log)
    if config.target_l1 is not None and end == config.steps and loss_log:
        recent = [row["l1"] for row in loss_log[-5:]]
        if np.mean(recent) > config.target_l1:
            raise TrainingError(f"final L1 {np.mean(recent):.4g} is above the target "
                                f"{config.target_l1:g}", final)
    return final


def encoder_input(cloud: np.ndarray, n_points: int) -> np.ndarray:
    """Deterministic encoder input: the first ``n_points`` stored samples."""
    return cloud[:n_points]


def extract_latents(model: ModulationModel, records: Sequence[ShapeRecord],
                    n_points: int = 512) -> np.ndarray:
    """Posterior-mean latent per record, shape ``(len(records), D)``."""
    if not records:
        return np.zeros((0, model.latent_dim))
    clouds = np.stack([encoder_input(r.cloud, n_points) for r in records])
    return model.latent(clouds)


def write_latents(out_dir, latents: np.ndarray, records: Sequence[ShapeRecord],
                  data_dir=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    serialization.save_latents(out / "latents.dsdf", latents)
    entries = [{"index": i, "name": r.name, "category": r.category,
                "condition_cloud": str(Path(data_dir) / "train" / f"{r.name}.xyz") if data_dir
                else None} for i, r in enumerate(records)]
    (out / "latents.json").write_text(json.dumps({"latents": "latents.dsdf",
                                                  "count": len(records),
                                                  "dim": int(latents.shape[1]),
                                                  "entries": entries}, indent=2) + "\n")


# -- phase 2: diffusion ---------------------------------------------------------------

def train_diffusion(config: TrainConfig, latents: np.ndarray,
                    records: Sequence[ShapeRecord] | None = None,
                    encoder_init: dict[str, np.ndarray] | None = None,
                    resume: Checkpoint | None = None, stop_after: int | None = None,
                    log_path=None) -> Checkpoint:
    """Fit the denoiser on saved latents.

    In conditional mode ``records`` (aligned with ``latents``) supply full
    clouds that are subsampled and cropped afresh every iteration; the
    condition encoder starts from ``encoder_init`` (a modulation encoder state).
    """
    latents = np.asarray(latents, dtype=np.float64)
    if config.conditional and (records is None or len(records) != len(latents)):
        raise ValueError("conditional training needs one record per latent")
    rng = np.random.default_rng(config.seed)
    dcfg = config.denoiser_config()
    schedule = config.schedule()
    model = Denoiser(dcfg, seed=config.seed)
    if config.conditional and encoder_init is not None:
        model.cond_encoder.load_state_dict(encoder_init)
    opt = Adam(model.named_parameters(), lr=config.lr)
    start, loss_log = _restore(resume, model, opt, rng)
    end = config.steps if stop_after is None else min(stop_after, config.steps)
    n = len(latents)
    for step in range(start, end):
        step_rng = rng.bit_generator.state
        idx = rng.integers(n, size=config.batch_size)
        t = rng.integers(1, schedule.T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, dcfg.latent_dim))
        opt.state.lr = config.lr_at(step)
        try:
            with GradientTape() as tape:
                cond = None
                if config.conditional:
                    feats = model.encode_condition(_partials(records, idx, config, rng))
                    cond, _ = drop_conditions(feats, config.dropout_p, rng)
                loss = diffusion_loss(model, latents[idx], t, eps, cond, schedule)
            tape.backward(loss)
            opt.step()
        except NonFiniteError as exc:
            rng.bit_generator.state = step_rng
            good = _checkpoint("diffusion", step, config, model, dcfg, opt, rng, loss_log)
            raise TrainingError(f"diffusion step {step}: {exc}", good) from exc
        opt.zero_grad()
        if step % config.log_every == 0 or step == config.steps - 1:
            _log_row(loss_log, step, {"loss": loss.item()}, log_path)
    return _checkpoint("diffusion", end, config, model, dcfg, opt, rng, loss_log)


def encoder_state(model: ModulationModel) -> dict[str, np.ndarray]:
    """Modulation encoder weights keyed for a denoiser's condition encoder."""
    return {k[len("encoder."):]: v for k, v in model.state_dict().items()
            if k.startswith("encoder.")}


# -- phase 3: end-to-end fine-tune ------------------------------------------------------

@dataclass
class JointLoss:
    total: Tensor
    modulation: Tensor
    diffusion: Tensor
    geometry: Tensor


def joint_loss(mod: ModulationModel, diff: Denoiser, clouds, queries, gts, partials,
               config: TrainConfig, rng, schedule) -> JointLoss:
    """Modulation loss + conditional diffusion loss + SDF L1 of the one-step prediction.

    The diffusion input is drawn from the live encoder's latent; the clean
    target is detached when ``config.detach_target``.  All terms are unweighted.
    """
    mod_loss = modulation_loss(mod, clouds, queries, gts, config.kl_weight, rng, config.prior_std)
    z0 = mod_loss.z
    b = z0.shape[0]
    t_hi = schedule.T if config.t_max is None else config.t_max
    t = rng.integers(1, t_hi + 1, size=b)
    eps = rng.standard_normal(z0.shape)
    z_t = q_sample(z0, t, eps, schedule)
    cond = None
    if diff.config.conditional:
        cond, _ = drop_conditions(diff.encode_condition(partials), config.dropout_p, rng)
    z_pred = denoise(diff, z_t, t, cond)
    target = Tensor(z0.data) if config.detach_target else z0
    diff_term = (z_pred - target).square().mean()
    geo_term = (mod.sdf_decode(queries, z_pred) - Tensor(gts)).abs().mean()
    return JointLoss(mod_loss.total + diff_term + geo_term, mod_loss.total, diff_term, geo_term)


def finetune_end_to_end(mod_ckpt: Checkpoint, diff_ckpt: Checkpoint, config: TrainConfig,
                        records: Sequence[ShapeRecord], log_path=None
                        ) -> tuple[Checkpoint, Checkpoint]:
    """Jointly optimise both models with the summed loss; returns updated checkpoints."""
    rng = np.random.default_rng(config.seed)
    mod = load_modulation(mod_ckpt)
    diff = load_denoiser(diff_ckpt)
    schedule = make_schedule(**_schedule_kwargs(diff_ckpt.config))
    named = {}
    if not config.freeze_modulation:
        named.update({f"mod.{k}": v for k, v in mod.named_parameters()})
    if not config.freeze_diffusion:
        named.update({f"diff.{k}": v for k, v in diff.named_parameters()})
    frozen = [p for p in mod.parameters() + diff.parameters()
              if not any(p is q for q in named.values())]
    opt = Adam(named.items(), lr=config.lr)
    loss_log: list = []
    mcfg = ModulationConfig.from_dict(mod_ckpt.model_config)
    dcfg = DenoiserConfig.from_dict(diff_ckpt.model_config)
    for p in frozen:
        p.requires_grad = False
    try:
        _finetune_loop(mod, diff, opt, named, config, records, schedule, rng, loss_log,
                       dcfg.conditional, log_path)
    except TrainingError as exc:
        exc.checkpoint = Checkpoint("finetune", exc.step, config.to_dict(), mcfg.to_dict(),
                                    mod.state_dict(), loss_log=list(loss_log))
        raise
    finally:
        for p in frozen:
            p.requires_grad = True
    mod_out = Checkpoint("finetune", config.steps, config.to_dict(), mcfg.to_dict(),
                         mod.state_dict(), loss_log=list(loss_log))
    diff_out = Checkpoint("finetune", config.steps, {**diff_ckpt.config, **_schedule_kwargs(
        diff_ckpt.config)}, dcfg.to_dict(), diff.state_dict(), loss_log=list(loss_log))
    return mod_out, diff_out


def _finetune_loop(mod, diff, opt, named, config, records, schedule, rng, loss_log,
                   conditional, log_path) -> None:
    for step in range(config.steps):
        idx, clouds, queries, gts = _modulation_batch(records, config, rng)
        partials = _partials(records, idx, config, rng) if conditional else None
        opt.state.lr = config.lr_at(step)
        try:
            with GradientTape() as tape:
                loss = joint_loss(mod, diff, clouds, queries, gts, partials, config, rng, schedule)
            tape.backward(loss.total)
            if named:
                opt.step()
        except NonFiniteError as exc:
            # parameters are untouched: adam validates before updating
            raise TrainingError(f"fine-tune step {step}: {exc}", None, step) from exc
        opt.zero_grad()
        if step % config.log_every == 0 or step == config.steps - 1:
            _log_row(loss_log, step, {"loss": loss.total.item(),
                                      "modulation": loss.modulation.item(),
                                      "diffusion": loss.diffusion.item(),
                                      "geometry": loss.geometry.item()}, log_path)


def _schedule_kwargs(cfg: dict) -> dict:
    return {"T": cfg.get("T", 500), "beta_1": cfg.get("beta_1", 1e-4),
            "beta_T": cfg.get("beta_T", 0.02)}


def schedule_for(diff_ckpt: Checkpoint):
    return make_schedule(**_schedule_kwargs(diff_ckpt.config))


# -- generation ------------------------------------------------------------------------

@dataclass
class Generation:
    latent: np.ndarray
    mesh: Mesh | None = None
    cons: float | None = None

    @property
    def empty(self) -> bool:
        return self.mesh is None or self.mesh.is_empty


def sample_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent per-sample generators derived from the master seed by index."""
    return [np.random.default_rng([seed, i]) for i in range(n)]


def generate(mod: ModulationModel, diff: Denoiser, schedule, n: int, condition=None,
             resolution: int = 64, omega: float = 0.0, seed: int = 0,
             mesh: bool = True) -> list[Generation]:
    """Sample ``n`` latents (optionally conditioned on a partial cloud), score and mesh them.

    CONS is computed against the condition cloud when one is given.  With
    ``mesh=False`` meshing is deferred (see :func:`mesh_generations`).
    """
    if n == 0:
        return []
    cond = None
    if condition is not None:
        with no_tape():
            cond = diff.encode_condition(np.asarray(condition, dtype=np.float64)).data
    latents = sample(diff, schedule, n, cond, omega, sample_rngs(seed, n))
    gens = [Generation(z) for z in latents]
    if condition is not None:
        for g in gens:
            g.cons = cons_metric(condition, mod, g.latent)
    if mesh:
        mesh_generations(mod, gens, resolution)
    return gens


def mesh_generations(mod: ModulationModel, gens: Sequence[Generation], resolution: int = 64):
    for g in gens:
        g.mesh = reconstruct_mesh(mod, g.latent, resolution)
    return gens


def filter_by_cons(gens: Sequence[Generation], threshold: float) -> list[Generation]:
    """Keep generations whose CONS does not exceed ``threshold``."""
    missing = [g for g in gens if g.cons is None]
    if missing:
        raise ValueError("CONS has not been computed for every generation")
    return [g for g in gens if g.cons <= threshold]
