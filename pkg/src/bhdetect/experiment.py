"""Desk-scale experiment: train on synthetic crops, then score every preset suite.

Used by ``scripts/run_desk_experiment.py`` and the acceptance tests.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import evalsuite, segnet, trainer
from . import scenegen as sg

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    train_seed: int = 0
    n_train: int = 200
    epochs: int = 100
    eval_seed: int = 7
    n_frames: int = 300
    w_max: int = 40
    soc_windows: tuple[int, int] = (1, 40)
    presets: tuple[str, ...] = ("headon", "stationary", "vehicles", "multi")
    camera: sg.CameraModel = field(default_factory=sg.CameraModel)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)


@dataclass
class PresetOutcome:
    name: str
    cases: list[evalsuite.EvalCase]
    zfa: evalsuite.ZfaResult
    soc: list[evalsuite.SocPoint] | None = None


@dataclass
class DeskResult:
    net: segnet.Network
    history: list[float]
    presets: dict[str, PresetOutcome]
    seconds: float


def training_crops(n: int, seed: int, camera: sg.CameraModel, crop: int) -> list[trainer.LabeledSample]:
    """``n`` labelled crops, each holding one aircraft (no birds, half with vehicles)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2000]))
    out = []
    for k, (img, mask, meta) in enumerate(sg.training_frames(n, seed, camera)):
        full = trainer.LabeledSample(img, mask, f"sample_{k:05d}", meta)
        out.append(trainer.crop_around_aircraft(full, crop, rng))
    return out


def train_network(cfg: DeskConfig) -> tuple[segnet.Network, list[float]]:
    data = training_crops(cfg.n_train, cfg.train_seed, cfg.camera, cfg.train.crop_size)
    tcfg = trainer.TrainConfig(**{**cfg.train.__dict__, "max_epochs": cfg.epochs})
    net = segnet.build_network(
        segnet.NetworkConfig(), np.random.default_rng(np.random.SeedSequence([tcfg.seed, 3000]))
    )
    return trainer.train(net, data, tcfg)


def preset_cases(net: segnet.Network, name: str, cfg: DeskConfig) -> list[evalsuite.EvalCase]:
    cases = []
    for case_id, spec in sg.preset_suite(name, cfg.eval_seed, cfg.camera, cfg.n_frames):
        seq = sg.generate_encounter(spec, cfg.camera, cfg.eval_seed)
        masks = segnet.segment(net, seq.frames)
        cases.append(evalsuite.EvalCase(case_id, masks, seq.truth, cfg.camera.frame_rate_hz))
    return cases


def run(cfg: DeskConfig | None = None, net: segnet.Network | None = None) -> DeskResult:
    """Train (unless ``net`` is given) and evaluate every preset in ``cfg.presets``."""
    cfg = cfg or DeskConfig()
    t0 = time.perf_counter()
    history: list[float] = []
    if net is None:
        net, history = train_network(cfg)
    outcomes = {}
    for name in cfg.presets:
        cases = preset_cases(net, name, cfg)
        zfa = evalsuite.zfa_search(cases, cfg.w_max)
        soc = None
        if name == "headon":
            a, b = cfg.soc_windows
            soc = evalsuite.soc_curve(cases, range(a, b + 1))
        outcomes[name] = PresetOutcome(name, cases, zfa, soc)
        log.info("%s: W*=%s", name, zfa.window)
    return DeskResult(net, history, outcomes, time.perf_counter() - t0)
