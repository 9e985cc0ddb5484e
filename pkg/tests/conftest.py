"""Shared fixtures: the trained toy pipeline (cached on disk) and the per-criterion report."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from latent_sdf import pipeline
from latent_sdf.pipeline import Checkpoint, TrainConfig

ROOT = Path(__file__).resolve().parents[1]
CACHE = ROOT / ".cache" / "acceptance"

DATA_SEED = 7
N_TRAIN, N_TEST = 200, 32

MOD = TrainConfig(phase="modulation", seed=0, steps=12000, batch_size=8, lr=1e-3,
                  lr_half_life=3000, n_queries=512, log_every=50)
DIFF_UNCOND = TrainConfig(phase="diffusion", seed=1, conditional=False, steps=8000,
                          batch_size=32, lr=1e-4, log_every=50)
DIFF_COND = TrainConfig(phase="diffusion", seed=2, conditional=True, steps=8000,
                        batch_size=32, lr=1e-4, log_every=50)
OVERFIT = TrainConfig(phase="modulation", seed=4, steps=4000, batch_size=10, lr=1e-3,
                      lr_half_life=1500, n_queries=512, log_every=50)
FINETUNE = TrainConfig(phase="finetune", seed=3, steps=300, batch_size=8, lr=1e-5,
                       n_queries=512, log_every=10)

RESULTS: dict[int, tuple[bool, str]] = {}
CRITERIA = {
    1: "gradient suite",
    2: "diffusion statistics",
    3: "modulation fidelity",
    4: "marching cubes correctness",
    5: "unconditional generation",
    6: "conditional completion",
    7: "fine-tune directionality",
    8: "guidance degeneracy",
    9: "metric oracles",
    10: "determinism",
}


def record(criterion: int, passed: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(passed), detail)
    print(f"criterion {criterion} ({CRITERIA[criterion]}): {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n in RESULTS:
            passed, detail = RESULTS[n]
            line = f"criterion {n:2d} {CRITERIA[n]:<28s} {'PASS' if passed else 'FAIL'}  {detail}"
        else:
            line = f"criterion {n:2d} {CRITERIA[n]:<28s} NOT RUN"
        terminalreporter.write_line(line)


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted((ROOT / "src" / "latent_sdf").rglob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _key(*parts) -> str:
    blob = json.dumps([p.to_dict() if isinstance(p, TrainConfig) else p for p in parts],
                      sort_keys=True)
    return hashlib.sha256((blob + _source_digest()).encode()).hexdigest()[:16]


class Artifacts:
    """Lazily trained checkpoints for the toy benchmark.

    Every stage is keyed on its config, its inputs and the package source, so
    any code change retrains from scratch rather than reusing stale weights.
    """

    def __init__(self, root: Path):
        self.root = root
        self.timings: dict[str, float] = {}
        rng = np.random.default_rng(DATA_SEED)
        self.train = pipeline.make_records(N_TRAIN, rng, prefix="train")
        self.test = pipeline.make_records(N_TEST, rng, prefix="test")

    def _stage(self, name: str, key: str, build):
        path = self.root / f"{name}-{key}.dsdf"
        timing = path.with_suffix(".json")
        if path.exists():
            self.timings[name] = json.loads(timing.read_text())["seconds"]
            return Checkpoint.load(path)
        start = time.perf_counter()
        ckpt = build()
        self.timings[name] = time.perf_counter() - start
        self.root.mkdir(parents=True, exist_ok=True)
        ckpt.save(path)
        timing.write_text(json.dumps({"seconds": self.timings[name]}))
        return ckpt

    def modulation(self) -> Checkpoint:
        return self._stage("modulation", _key(MOD, DATA_SEED),
                           lambda: pipeline.train_modulation(MOD, self.train))

    def overfit(self) -> Checkpoint:
        return self._stage("overfit", _key(OVERFIT, DATA_SEED),
                           lambda: pipeline.train_modulation(OVERFIT, self.train[:10]))

    def latents(self) -> np.ndarray:
        return pipeline.extract_latents(pipeline.load_modulation(self.modulation()), self.train,
                                        MOD.n_points)

    def diffusion(self, conditional: bool) -> Checkpoint:
        cfg = DIFF_COND if conditional else DIFF_UNCOND
        mod = pipeline.load_modulation(self.modulation())

        def build():
            enc = pipeline.encoder_state(mod) if conditional else None
            return pipeline.train_diffusion(cfg, self.latents(), self.train, enc)

        return self._stage(f"diffusion-{'cond' if conditional else 'uncond'}",
                           _key(MOD, cfg, DATA_SEED), build)

    def finetuned(self) -> tuple[Checkpoint, Checkpoint]:
        key = _key(MOD, DIFF_COND, FINETUNE, DATA_SEED)
        mod_path = self.root / f"finetune-mod-{key}.dsdf"
        diff_path = self.root / f"finetune-diff-{key}.dsdf"
        if mod_path.exists() and diff_path.exists():
            return Checkpoint.load(mod_path), Checkpoint.load(diff_path)
        mod, diff = pipeline.finetune_end_to_end(self.modulation(), self.diffusion(True),
                                                 FINETUNE, self.train)
        mod.save(mod_path)
        diff.save(diff_path)
        return mod, diff


@pytest.fixture(scope="session")
def artifacts() -> Artifacts:
    return Artifacts(CACHE)
