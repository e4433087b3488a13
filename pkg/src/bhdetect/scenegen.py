"""Synthetic below-horizon encounter sequences with exact ground truth.

Frames are 8-bit greyscale renders of value-noise terrain under a light sky
band. Aircraft are dark winged silhouettes whose span follows a pinhole model
of range; ground vehicles are bright rectangles on a road; birds are short-lived
dark specks that the segmenter cannot tell from distant aircraft and which the
persistence filter has to reject.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import ParseError, SpecError
from .fileio import atomic_write_text, read_pgm, write_pgm

KINDS = ("head_on", "stationary_tail_chase", "ground_vehicle", "multi_aircraft")
SOCATA_WINGSPAN_M = 9.97


@dataclass
class CameraModel:
    width: int = 128
    height: int = 128
    focal_px: float = 2000.0
    frame_rate_hz: float = 15.0
    horizon_frac: float = 0.25

    def __post_init__(self):
        if min(self.width, self.height) <= 0 or self.focal_px <= 0 or self.frame_rate_hz <= 0:
            raise SpecError(f"camera parameters must be positive: {self}")
        if not 0.0 <= self.horizon_frac < 1.0:
            raise SpecError("horizon_frac must lie in [0, 1)")

    @property
    def horizon_row(self) -> int:
        return int(round(self.horizon_frac * self.height))

    @classmethod
    def full_scale(cls) -> "CameraModel":
        return cls(width=1280, height=960)


@dataclass
class TargetSpec:
    initial_range_m: float
    closure_rate_mps: float
    start_px: tuple[float, float]  # (row, col)
    drift_px: tuple[float, float] = (0.0, 0.0)  # (row, col) per frame
    wingspan_m: float = SOCATA_WINGSPAN_M
    visibility_prob: float = 1.0


@dataclass
class VehicleSpec:
    road_row: int
    start_col: float
    velocity_px: float
    length_px: int = 4


@dataclass
class BirdSpec:
    """Transient aircraft-like clutter (not ground truth aircraft)."""

    rate_per_frame: float = 0.0  # expected new birds per frame
    max_lifetime: int = 20
    size_px: tuple[float, float] = (2.0, 4.0)
    max_speed_px: float = 0.5


@dataclass
class EncounterSpec:
    kind: str
    n_frames: int
    targets: list[TargetSpec] = field(default_factory=list)
    vehicles: list[VehicleSpec] = field(default_factory=list)
    birds: BirdSpec = field(default_factory=BirdSpec)
    clutter_seed: int = 0
    noise_sigma: float = 2.0

    def validate(self, camera: CameraModel) -> None:
        if self.kind not in KINDS:
            raise SpecError(f"unknown encounter kind {self.kind!r}")
        if self.n_frames < 1:
            raise SpecError("n_frames must be >= 1")
        dt_total = (self.n_frames - 1) / camera.frame_rate_hz
        for i, t in enumerate(self.targets):
            if t.initial_range_m <= 0 or t.wingspan_m <= 0:
                raise SpecError(f"target {i}: range and wingspan must be positive")
            if t.initial_range_m - t.closure_rate_mps * dt_total <= 0:
                raise SpecError(f"target {i}: range reaches zero within the sequence")
            if not 0.0 < t.visibility_prob <= 1.0:
                raise SpecError(f"target {i}: visibility_prob must lie in (0, 1]")
            if self.kind == "head_on" and t.closure_rate_mps <= 0:
                raise SpecError(f"target {i}: head-on closure rate must be positive")
            if self.kind == "stationary_tail_chase" and tuple(t.drift_px) != (0.0, 0.0):
                raise SpecError(f"target {i}: stationary encounter needs zero drift")
        if self.noise_sigma < 0:
            raise SpecError("noise_sigma must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "EncounterSpec":
        d = dict(d)
        d["targets"] = [
            TargetSpec(**{**t, "start_px": tuple(t["start_px"]), "drift_px": tuple(t["drift_px"])})
            for t in d.get("targets", [])
        ]
        d["vehicles"] = [VehicleSpec(**v) for v in d.get("vehicles", [])]
        b = dict(d.get("birds", {}))
        if "size_px" in b:
            b["size_px"] = tuple(b["size_px"])
        d["birds"] = BirdSpec(**b)
        return cls(**d)


@dataclass
class TargetTruth:
    cx: float
    cy: float
    range_m: float
    visible: bool


@dataclass
class VehicleTruth:
    cx: float
    cy: float


@dataclass
class FrameTruth:
    frame: int
    targets: list[TargetTruth]
    vehicles: list[VehicleTruth]


@dataclass
class LabeledSequence:
    frames: np.ndarray  # (T, H, W) uint8
    masks: np.ndarray  # (T, H, W) uint8 in {0, 1}
    truth: list[FrameTruth]
    camera: CameraModel
    spec: EncounterSpec

    def __len__(self) -> int:
        return len(self.frames)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledSequence):
            return NotImplemented
        return (
            np.array_equal(self.frames, other.frames)
            and np.array_equal(self.masks, other.masks)
            and self.truth == other.truth
            and self.camera == other.camera
            and self.spec == other.spec
        )


# ------------------------------------------------------------------- rendering


def apparent_size(range_m: float, wingspan_m: float, focal_px: float) -> float:
    """Pinhole projection of the wingspan, in pixels."""
    if range_m <= 0:
        raise ValueError(f"range must be positive, got {range_m}")
    return focal_px * wingspan_m / range_m


def _value_noise(h: int, w: int, rng: np.random.Generator, octaves=(4, 8, 16, 32)) -> np.ndarray:
    acc = np.zeros((h, w))
    amp, total = 1.0, 0.0
    for cells in octaves:
        gh, gw = max(2, h * cells // max(h, w)), max(2, w * cells // max(h, w))
        grid = rng.random((gh + 1, gw + 1))
        up = zoom(grid, ((h + 1) / (gh + 1), (w + 1) / (gw + 1)), order=1)[:h, :w]
        acc += amp * up
        total += amp
        amp *= 0.6
    acc /= total
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo + 1e-12)


def render_background(camera: CameraModel, seed: int) -> np.ndarray:
    """Deterministic sky band over textured terrain, uint8."""
    rng = np.random.default_rng(seed)
    h, w = camera.height, camera.width
    ground = 55.0 + 140.0 * _value_noise(h, w, rng)
    sky = 205.0 + 25.0 * _value_noise(h, w, rng, octaves=(2, 4))
    img = ground
    hr = camera.horizon_row
    img[:hr] = sky[:hr]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def render_road(image: np.ndarray, road_row: int, width: int = 5) -> None:
    r0 = max(0, road_row - width // 2)
    r1 = min(image.shape[0], r0 + width)
    band = image[r0:r1].astype(np.float64)
    image[r0:r1] = np.clip(0.3 * band + 0.7 * 110.0, 0, 255).astype(np.uint8)


def _centered(center: int, length: int) -> tuple[int, int]:
    return center - (length - 1) // 2, center + length // 2 + 1


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def silhouette(size_px: float) -> list[tuple[int, int, int, int]]:
    """Row/col boxes (r0, r1, c0, c1) relative to the centre for a winged shape.

    Every box is centred on the origin and grows monotonically with size, so
    the stamped area never shrinks as the aircraft approaches.
    """
    if size_px < 1.5:
        return [(0, 1, 0, 1)]
    span = _round(size_px)
    wing_t = max(1, _round(size_px / 8))
    fus_len = max(1, _round(size_px * 0.45))
    fus_t = max(1, _round(size_px / 10))
    return [(*_centered(0, wing_t), *_centered(0, span)), (*_centered(0, fus_len), *_centered(0, fus_t))]


def _local_mean(image: np.ndarray, r: int, c: int, radius: int) -> float:
    h, w = image.shape
    win = image[max(0, r - radius) : min(h, r + radius + 1), max(0, c - radius) : min(w, c + radius + 1)]
    return float(win.mean())


def render_aircraft(image, mask, centroid, size_px: float, rng: np.random.Generator) -> bool:
    """Stamp a dark winged silhouette centred at ``centroid`` (row, col).

    Writes 1 into ``mask`` on exactly the stamped pixels. Returns False (and
    draws nothing) when the centre lies outside the image.
    """
    h, w = image.shape
    r, c = _round(centroid[0]), _round(centroid[1])
    if not (0 <= r < h and 0 <= c < w):
        return False
    local = _local_mean(image, r, c, max(3, _round(size_px)))
    shade = rng.uniform(15.0, 40.0)
    coverage = min(1.0, size_px)
    value = local - (local - min(shade, local - 1.0)) * coverage
    for r0, r1, c0, c1 in silhouette(size_px):
        rs, re = max(0, r + r0), min(h, r + r1)
        cs, ce = max(0, c + c0), min(w, c + c1)
        image[rs:re, cs:ce] = np.clip(_round(value), 0, 255)
        mask[rs:re, cs:ce] = 1
    return True


def render_vehicle(image, centroid, length_px: int) -> bool:
    """Bright rectangle (never touches the aircraft mask)."""
    h, w = image.shape
    r, c = _round(centroid[0]), _round(centroid[1])
    if not (0 <= r < h and 0 <= c < w):
        return False
    height = max(1, length_px // 2)
    r0, r1 = _centered(r, height)
    c0, c1 = _centered(c, length_px)
    local = _local_mean(image, r, c, length_px)
    value = min(255.0, max(local + 70.0, 200.0))
    image[max(0, r0) : min(h, r1), max(0, c0) : min(w, c1)] = _round(value)
    return True


# ------------------------------------------------------------------- sequences


def _target_position(t: TargetSpec, k: int) -> tuple[float, float]:
    return t.start_px[0] + t.drift_px[0] * k, t.start_px[1] + t.drift_px[1] * k


def target_range(t: TargetSpec, k: int, frame_rate_hz: float) -> float:
    return t.initial_range_m - t.closure_rate_mps * k / frame_rate_hz


def _bird_schedule(spec: EncounterSpec, camera: CameraModel, rng) -> list[dict]:
    b = spec.birds
    birds = []
    if b.rate_per_frame <= 0:
        return birds
    hr = camera.horizon_row
    for k in range(spec.n_frames):
        for _ in range(rng.poisson(b.rate_per_frame)):
            angle = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0, b.max_speed_px)
            birds.append(
                {
                    "start": k,
                    "life": int(rng.integers(1, b.max_lifetime + 1)),
                    "pos": (rng.uniform(hr + 4, camera.height - 4), rng.uniform(4, camera.width - 4)),
                    "vel": (speed * np.sin(angle), speed * np.cos(angle)),
                    "size": rng.uniform(*b.size_px),
                }
            )
    return birds


def generate_encounter(spec: EncounterSpec, camera: CameraModel, seed: int) -> LabeledSequence:
    """Render every frame of an encounter together with its ground truth.

    Ranges follow ``initial - closure * t``; stationary tail-chase specs are
    already expressed in playback order (range decreasing), so no reversal
    happens here.
    """
    spec.validate(camera)
    ss = np.random.SeedSequence([seed, spec.clutter_seed])
    vis_rng, stamp_rng, noise_rng, bird_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    base = render_background(camera, spec.clutter_seed)
    for v in spec.vehicles:
        render_road(base, v.road_row)
    birds = _bird_schedule(spec, camera, bird_rng)

    T, H, W = spec.n_frames, camera.height, camera.width
    frames = np.empty((T, H, W), np.uint8)
    masks = np.zeros((T, H, W), np.uint8)
    truth = []
    for k in range(T):
        img = base.copy()
        vtruth = []
        for v in spec.vehicles:
            pos = (float(v.road_row), v.start_col + v.velocity_px * k)
            render_vehicle(img, pos, v.length_px)
            vtruth.append(VehicleTruth(cx=float(_round(pos[1])), cy=float(_round(pos[0]))))
        for bd in birds:
            age = k - bd["start"]
            if 0 <= age < bd["life"]:
                pos = (bd["pos"][0] + bd["vel"][0] * age, bd["pos"][1] + bd["vel"][1] * age)
                render_aircraft(img, np.zeros_like(img), pos, bd["size"], stamp_rng)
        ttruth = []
        for t in spec.targets:
            pos = _target_position(t, k)
            rng_m = target_range(t, k, camera.frame_rate_hz)
            shown = bool(vis_rng.random() < t.visibility_prob)
            if shown:
                size = apparent_size(rng_m, t.wingspan_m, camera.focal_px)
                shown = render_aircraft(img, masks[k], pos, size, stamp_rng)
            ttruth.append(
                TargetTruth(cx=float(_round(pos[1])), cy=float(_round(pos[0])), range_m=float(rng_m), visible=shown)
            )
        if spec.noise_sigma > 0:
            noisy = img + noise_rng.normal(0.0, spec.noise_sigma, img.shape)
            img = np.clip(np.rint(noisy), 0, 255).astype(np.uint8)
        frames[k] = img
        truth.append(FrameTruth(frame=k, targets=ttruth, vehicles=vtruth))
    return LabeledSequence(frames=frames, masks=masks, truth=truth, camera=camera, spec=spec)


# ---------------------------------------------------------------------- disk io


def _truth_json(seq: LabeledSequence) -> dict:
    return {
        "camera": asdict(seq.camera),
        "spec": seq.spec.to_json(),
        "frames": [
            {
                "frame": ft.frame,
                "targets": [asdict(t) for t in ft.targets],
                "vehicles": [asdict(v) for v in ft.vehicles],
            }
            for ft in seq.truth
        ],
    }


def frame_name(k: int) -> str:
    return f"frame_{k:05d}.pgm"


def mask_name(k: int) -> str:
    return f"frame_{k:05d}.mask.pgm"


def write_sequence(seq: LabeledSequence, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(len(seq)):
        write_pgm(d / frame_name(k), seq.frames[k])
        write_pgm(d / mask_name(k), (seq.masks[k] * 255).astype(np.uint8))
    atomic_write_text(d / "truth.json", json.dumps(_truth_json(seq), indent=1, sort_keys=True) + "\n")


def read_truth(directory) -> tuple[CameraModel, EncounterSpec, list[FrameTruth]]:
    path = Path(directory) / "truth.json"
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode())
    except UnicodeDecodeError as exc:
        raise ParseError(path, exc.start, "not valid UTF-8") from None
    except json.JSONDecodeError as exc:
        raise ParseError(path, _byte_offset(raw, exc.pos), exc.msg) from None
    try:
        camera = CameraModel(**doc["camera"])
        spec = EncounterSpec.from_json(doc["spec"])
        truth = [
            FrameTruth(
                frame=int(f["frame"]),
                targets=[TargetTruth(**t) for t in f["targets"]],
                vehicles=[VehicleTruth(**v) for v in f["vehicles"]],
            )
            for f in doc["frames"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, 0, f"invalid truth manifest: {exc!r}") from None
    return camera, spec, truth


def _byte_offset(raw: bytes, char_pos: int) -> int:
    return len(raw.decode()[:char_pos].encode())


def read_mask_dir(directory, n_frames: int) -> np.ndarray:
    d = Path(directory)
    return np.stack([(read_pgm(d / mask_name(k)) > 0).astype(np.uint8) for k in range(n_frames)])


def read_sequence(directory) -> LabeledSequence:
    d = Path(directory)
    camera, spec, truth = read_truth(d)
    n_pgm = len(list(d.glob("frame_*.mask.pgm")))
    if n_pgm != len(truth):
        raise ParseError(d / "truth.json", 0, f"manifest lists {len(truth)} frames but {n_pgm} masks exist")
    frames = np.stack([read_pgm(d / frame_name(k)) for k in range(len(truth))])
    masks = read_mask_dir(d, len(truth))
    return LabeledSequence(frames=frames, masks=masks, truth=truth, camera=camera, spec=spec)


# ---------------------------------------------------------------------- presets

PRESET_CASES = {"headon": 10, "stationary": 2, "vehicles": 4, "multi": 1}
DEFAULT_BIRDS = BirdSpec(rate_per_frame=0.04, max_lifetime=20)


def _ground_point(rng, camera: CameraModel, margin: int = 12) -> tuple[float, float]:
    hr = camera.horizon_row
    return (
        float(rng.integers(hr + margin, camera.height - margin)),
        float(rng.integers(margin, camera.width - margin)),
    )


def _headon_target(rng, camera: CameraModel) -> TargetSpec:
    return TargetSpec(
        initial_range_m=float(rng.uniform(4200.0, 5200.0)),
        closure_rate_mps=float(rng.uniform(95.0, 110.0)),
        start_px=_ground_point(rng, camera),
        drift_px=(float(rng.uniform(-0.03, 0.03)), float(rng.uniform(-0.03, 0.03))),
    )


def preset_suite(
    name: str, seed: int, camera: CameraModel | None = None, n_frames: int = 300
) -> list[tuple[str, EncounterSpec]]:
    """Named encounter suites shaped like the flight-test groups.

    ``headon`` has 10 cases, ``stationary`` 2, ``vehicles`` 4 and ``multi`` 1.
    """
    camera = camera or CameraModel()
    if name not in PRESET_CASES:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESET_CASES)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, list(PRESET_CASES).index(name)]))
    cases = []
    for i in range(PRESET_CASES[name]):
        clutter = int(rng.integers(2**31))
        birds = BirdSpec(**asdict(DEFAULT_BIRDS))
        if name == "headon":
            spec = EncounterSpec("head_on", n_frames, [_headon_target(rng, camera)], birds=birds, clutter_seed=clutter)
            case = f"T{i + 1}"
        elif name == "stationary":
            tgt = TargetSpec(
                initial_range_m=float(rng.uniform(3300.0, 3800.0)),
                closure_rate_mps=float(rng.uniform(5.0, 15.0)),
                start_px=_ground_point(rng, camera),
            )
            spec = EncounterSpec("stationary_tail_chase", n_frames, [tgt], birds=birds, clutter_seed=clutter)
            case = f"S{i + 1}"
        elif name == "vehicles":
            tgt = _headon_target(rng, camera)
            vehicles = []
            for _ in range(int(rng.integers(1, 3))):
                road = int(rng.integers(camera.horizon_row + 10, camera.height - 6))
                while abs(road - tgt.start_px[0]) < 8:
                    road = int(rng.integers(camera.horizon_row + 10, camera.height - 6))
                speed = float(rng.uniform(0.2, 0.4)) * (1 if rng.random() < 0.5 else -1)
                start = float(rng.uniform(10, 30)) if speed > 0 else float(rng.uniform(camera.width - 30, camera.width - 10))
                vehicles.append(VehicleSpec(road_row=road, start_col=start, velocity_px=speed, length_px=int(rng.integers(3, 6))))
            spec = EncounterSpec("ground_vehicle", n_frames, [tgt], vehicles=vehicles, birds=birds, clutter_seed=clutter)
            case = f"G{i + 1}"
        else:
            known = _headon_target(rng, camera)
            row = float(camera.horizon_row + 14)
            crossing = TargetSpec(
                initial_range_m=3000.0,
                closure_rate_mps=20.0,
                start_px=(row, 10.0),
                drift_px=(0.0, 0.3),
                visibility_prob=0.7,
            )
            spec = EncounterSpec("multi_aircraft", n_frames, [known, crossing], birds=birds, clutter_seed=clutter)
            case = "M1"
        cases.append((case, spec))
    return cases


def training_frames(
    n: int, seed: int, camera: CameraModel | None = None, size_range=(1.5, 12.0)
) -> list[tuple[np.ndarray, np.ndarray, dict]]:
    """Single labelled frames with one aircraft each, for training.

    Apparent sizes are drawn uniformly from ``size_range``; half the frames
    also carry a road vehicle so the segmenter sees bright distractors.
    Birds are never rendered here.
    """
    camera = camera or CameraModel()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1000]))
    out = []
    for i in range(n):
        size = float(rng.uniform(*size_range))
        rng_m = camera.focal_px * SOCATA_WINGSPAN_M / size
        tgt = TargetSpec(initial_range_m=rng_m, closure_rate_mps=0.0, start_px=_ground_point(rng, camera, margin=8))
        vehicles = []
        if rng.random() < 0.5:
            # keep the vehicle within ~24 px of the aircraft so aircraft-centred crops include it
            r, c = tgt.start_px
            road = int(np.clip(r + rng.integers(-16, 17), camera.horizon_row + 6, camera.height - 5))
            side = 1.0 if rng.random() < 0.5 else -1.0
            col = c + side * rng.uniform(10, 24)
            if not 4 <= col <= camera.width - 4:
                col = c - side * rng.uniform(10, 24)
            vehicles.append(VehicleSpec(road, float(col), 0.0, int(rng.integers(3, 6))))
        kind = "ground_vehicle" if vehicles else "stationary_tail_chase"
        spec = EncounterSpec(kind, 1, [tgt], vehicles=vehicles, clutter_seed=int(rng.integers(2**31)))
        seq = generate_encounter(spec, camera, seed=int(rng.integers(2**31)))
        meta = {"size_px": size, "range_m": rng_m, "cx": seq.truth[0].targets[0].cx, "cy": seq.truth[0].targets[0].cy}
        out.append((seq.frames[0], seq.masks[0], meta))
    return out
