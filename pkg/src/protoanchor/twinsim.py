"""Parametric surrogate for the virtual-twin current simulator.

Generates labeled three-phase stator-current windows for four health
states. The base waveform is a balanced three-phase harmonic mixture at
the supply frequency f_e = pole_pairs * rpm / 60 (one pole pair here), with
configurable 5th/7th/11th/13th harmonics. Fault overlays:

* SWF scales one phase's amplitude down by a severity factor (pronounced
  phase imbalance, the easy class).
* BRB adds twin sidebands at f_e * (1 +/- 2s), i.e. a slow beat envelope.
* MRF applies a weak amplitude modulation at the rotor frequency
  f_r = (1 - s) * f_e, producing sidebands at f_e +/- f_r (the hard class).

The "physical" domain additionally applies a :class:`DomainShift`
(measurement noise, per-phase gain imbalance, phase jitter, triplen
harmonic distortion, DC offset) to create a controllable sim-to-real gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigurationError
from .seeding import rng_for

SPEEDS_RPM = (1200, 2400, 2700)
WINDOW_SECONDS = 0.2
POLE_PAIRS = 1


class Label(IntEnum):
    """Health states; enum order fixes the class order everywhere."""

    N = 0
    BRB = 1
    SWF = 2
    MRF = 3


LABELS = tuple(Label)
LABEL_NAMES = tuple(lbl.name for lbl in LABELS)
N_CLASSES = len(LABELS)

DOMAINS = ("virtual", "physical")


@dataclass(frozen=True)
class DomainShift:
    """Sim-to-real gap applied on top of the clean waveform."""

    noise_std: float = 0.0  # white noise std, as a fraction of clean RMS
    amp_imbalance: tuple[float, float, float] = (1.0, 1.0, 1.0)
    phase_jitter_rad: float = 0.0
    harmonic_distortion: float = 0.0  # 3rd-harmonic amplitude, fraction of fundamental
    dc_offset: float = 0.0  # fraction of fundamental amplitude

    def __post_init__(self):
        if min(self.noise_std, self.phase_jitter_rad, self.harmonic_distortion, self.dc_offset) < 0:
            raise ArgumentError("shift magnitudes must be non-negative")
        if len(self.amp_imbalance) != 3 or min(self.amp_imbalance) <= 0:
            raise ArgumentError("amp_imbalance needs three positive gains")


ZERO_SHIFT = DomainShift()
DEFAULT_SHIFT = DomainShift(
    noise_std=0.05,
    amp_imbalance=(1.05, 0.97, 1.0),
    phase_jitter_rad=0.02,
    harmonic_distortion=0.02,
    dc_offset=0.01,
)


@dataclass(frozen=True)
class SignalConfig:
    """Waveform and fault-signature parameters of the surrogate."""

    sample_rate_hz: float = 5120.0
    amplitude: float = 1.0
    amp_jitter: float = 0.01  # per-sample amplitude spread (relative)
    # Orders 5 and 7 dominate (the slot harmonics of the reference machine);
    # small 2nd/4th components keep the top-5 period set distinct and stable
    # at every speed and sample rate used here.
    harmonics: tuple[tuple[int, float], ...] = ((2, 0.09), (4, 0.08), (5, 0.12), (7, 0.10))
    swf_severity: float = 0.15
    brb_sideband: float = 0.10
    slip: float = 0.02
    mrf_depth: float = 0.05

    @property
    def window_len(self) -> int:
        return int(round(self.sample_rate_hz * WINDOW_SECONDS))


@dataclass
class SignalSample:
    """One labeled three-phase current window."""

    phases: np.ndarray  # [3, L]
    label: Label
    speed_rpm: int
    domain: str
    sample_rate_hz: float
    sample_id: str = ""

    def __post_init__(self):
        expected = int(round(self.sample_rate_hz * WINDOW_SECONDS))
        if self.phases.shape != (3, expected):
            raise ArgumentError(
                f"phases must be [3, {expected}] for {self.sample_rate_hz} Hz, got {self.phases.shape}"
            )
        if not np.all(np.isfinite(self.phases)):
            raise ArgumentError("phases must be finite")


def supply_frequency_hz(speed_rpm: int) -> float:
    return POLE_PAIRS * speed_rpm / 60.0


def generate(
    label: Label | str,
    speed_rpm: int,
    domain: str,
    shift: DomainShift,
    count: int,
    seed,
    signal: SignalConfig = SignalConfig(),
) -> list[SignalSample]:
    """Generate ``count`` windows for one (label, speed, domain) cell.

    Deterministic given the seed; the virtual domain ignores ``shift``.
    """
    if isinstance(label, str):
        try:
            label = Label[label]
        except KeyError:
            raise ArgumentError(f"unknown label '{label}'") from None
    if speed_rpm not in SPEEDS_RPM:
        raise ArgumentError(f"speed must be one of {SPEEDS_RPM}, got {speed_rpm}")
    if domain not in DOMAINS:
        raise ArgumentError(f"domain must be one of {DOMAINS}, got {domain}")
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")

    rng = rng_for(seed)
    fs = signal.sample_rate_hz
    length = signal.window_len
    t = np.arange(length) / fs
    f_e = supply_frequency_hz(speed_rpm)
    f_r = (1.0 - signal.slip) * f_e
    samples: list[SignalSample] = []
    for i in range(count):
        phi0 = rng.uniform(0.0, 2.0 * np.pi)
        amp = signal.amplitude * (1.0 + signal.amp_jitter * rng.standard_normal())
        jitter = (
            rng.normal(0.0, shift.phase_jitter_rad, size=3)
            if domain == "physical" and shift.phase_jitter_rad > 0
            else np.zeros(3)
        )
        brb_psi = rng.uniform(0.0, 2.0 * np.pi, size=2)
        mrf_psi = rng.uniform(0.0, 2.0 * np.pi)

        phases = np.empty((3, length))
        for c in range(3):
            theta = 2.0 * np.pi * f_e * t + phi0 - 2.0 * np.pi * c / 3.0 + jitter[c]
            wave = np.sin(theta)
            for order, rel in signal.harmonics:
                wave = wave + rel * np.sin(order * theta)
            if label is Label.BRB:
                side = signal.brb_sideband * (
                    np.sin((1.0 - 2.0 * signal.slip) * theta + brb_psi[0])
                    + np.sin((1.0 + 2.0 * signal.slip) * theta + brb_psi[1])
                )
                wave = wave + side
            if label is Label.MRF:
                wave = wave * (1.0 + signal.mrf_depth * np.cos(2.0 * np.pi * f_r * t + mrf_psi))
            phases[c] = amp * wave
        if label is Label.SWF:
            phases[0] *= 1.0 - signal.swf_severity

        if domain == "physical":
            gains = np.asarray(shift.amp_imbalance)
            phases = phases * gains[:, None]
            if shift.harmonic_distortion > 0:
                triplen = np.sin(3.0 * (2.0 * np.pi * f_e * t + phi0))
                phases = phases + shift.harmonic_distortion * amp * triplen[None, :]
            if shift.dc_offset > 0:
                phases = phases + shift.dc_offset * amp
            if shift.noise_std > 0:
                clean_rms = float(np.sqrt(np.mean(phases**2)))
                phases = phases + shift.noise_std * clean_rms * rng.standard_normal(phases.shape)

        samples.append(
            SignalSample(
                phases=phases,
                label=label,
                speed_rpm=speed_rpm,
                domain=domain,
                sample_rate_hz=fs,
                sample_id=f"{domain}-{label.name}-{speed_rpm}-{i:04d}",
            )
        )
    return samples


@dataclass(frozen=True)
class DatasetConfig:
    """One (condition, seed) dataset: virtual source pool + physical target pool."""

    speed_rpm: int = 2700
    source_per_class: int = 200
    target_per_class: int = 40
    seed: int = 0
    signal: SignalConfig = field(default_factory=SignalConfig)
    shift: DomainShift = field(default_factory=lambda: DEFAULT_SHIFT)


@dataclass
class DatasetArchive:
    """All samples of one dataset, with per-class pool accessors."""

    config: DatasetConfig
    samples: list[SignalSample]

    def pool(self, domain: str) -> dict[Label, list[SignalSample]]:
        out: dict[Label, list[SignalSample]] = {lbl: [] for lbl in LABELS}
        for s in self.samples:
            if s.domain == domain:
                out[s.label].append(s)
        return out

    def class_arrays(self, domain: str) -> dict[Label, np.ndarray]:
        return {lbl: np.stack([s.phases for s in group]) for lbl, group in self.pool(domain).items()}


def make_dataset(config: DatasetConfig, min_target_per_class: int | None = None) -> DatasetArchive:
    """Generate the full archive for one condition.

    ``min_target_per_class`` lets the caller assert up front that the target
    pool can serve its support/query splits (K + queries per class).
    """
    if config.source_per_class < 1 or config.target_per_class < 1:
        raise ConfigurationError("per-class counts must be positive")
    if min_target_per_class is not None and config.target_per_class < min_target_per_class:
        raise ConfigurationError(
            f"target pool of {config.target_per_class}/class cannot serve "
            f"{min_target_per_class} support+query samples per class"
        )
    samples: list[SignalSample] = []
    for domain, per_class, shift in (
        ("virtual", config.source_per_class, ZERO_SHIFT),
        ("physical", config.target_per_class, config.shift),
    ):
        for label in LABELS:
            samples.extend(
                generate(
                    label,
                    config.speed_rpm,
                    domain,
                    shift,
                    per_class,
                    seed=(config.seed, config.speed_rpm, domain, label.name, "generate"),
                    signal=config.signal,
                )
            )
    return DatasetArchive(config=config, samples=samples)


ARCHIVE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "signals.bin"


def save_archive(archive: DatasetArchive, directory: str | Path) -> tuple[Path, Path]:
    """Write manifest.json plus one raw blob of little-endian float64s.

    Each sample is stored phase-major ([phase0 L values][phase1][phase2]),
    concatenated in manifest order; offsets/lengths count float64 elements.
    Byte-identical for identical archives.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for s in archive.samples:
        n = s.phases.size
        entries.append(
            {
                "id": s.sample_id,
                "label": s.label.name,
                "speed": s.speed_rpm,
                "domain": s.domain,
                "offset": offset,
                "length": n,
            }
        )
        blobs.append(np.ascontiguousarray(s.phases, dtype="<f8"))
        offset += n
    manifest = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "sample_rate_hz": archive.config.signal.sample_rate_hz,
        "speed_rpm": archive.config.speed_rpm,
        "seed": archive.config.seed,
        "samples": entries,
    }
    manifest_path = directory / MANIFEST_NAME
    blob_path = directory / BLOB_NAME
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    with open(blob_path, "wb") as fh:
        for b in blobs:
            fh.write(b.tobytes())
    return manifest_path, blob_path


def load_archive(directory: str | Path) -> DatasetArchive:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_NAME).read_text())
    if manifest.get("format_version") != ARCHIVE_FORMAT_VERSION:
        raise ConfigurationError(f"unsupported archive format: {manifest.get('format_version')}")
    blob = np.fromfile(directory / BLOB_NAME, dtype="<f8")
    fs = float(manifest["sample_rate_hz"])
    samples = []
    for e in manifest["samples"]:
        data = blob[e["offset"] : e["offset"] + e["length"]]
        if data.size != e["length"]:
            raise ConfigurationError(f"blob truncated for sample {e['id']}")
        samples.append(
            SignalSample(
                phases=data.reshape(3, -1).astype(np.float64),
                label=Label[e["label"]],
                speed_rpm=int(e["speed"]),
                domain=e["domain"],
                sample_rate_hz=fs,
                sample_id=e["id"],
            )
        )
    cfg = DatasetConfig(
        speed_rpm=int(manifest["speed_rpm"]),
        source_per_class=sum(1 for s in samples if s.domain == "virtual" and s.label is Label.N),
        target_per_class=sum(1 for s in samples if s.domain == "physical" and s.label is Label.N),
        seed=int(manifest["seed"]),
        signal=SignalConfig(sample_rate_hz=fs),
    )
    return DatasetArchive(config=cfg, samples=samples)


def rms_imbalance(phases: np.ndarray) -> float:
    """Max relative deviation of per-phase RMS from their mean (SWF cue)."""
    rms = np.sqrt(np.mean(phases**2, axis=1))
    return float(np.max(np.abs(rms - rms.mean())) / rms.mean())


def scaled_config(signal: SignalConfig, sample_rate_hz: float) -> SignalConfig:
    """Same signature parameters at a different sample rate (desk/ci scale)."""
    return replace(signal, sample_rate_hz=sample_rate_hz)
