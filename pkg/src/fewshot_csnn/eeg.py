"""Synthetic braking-intent EEG trials and the segment preprocessing pipeline.

Recordings are generated at 500 Hz on the 19-channel 10-20 montage. Positive
windows carry a contingent negative variation (CNV): a slow negative ramp that
is strongest at Cz and falls off with distance from the vertex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.signal import lfilter

from .quantization import quantize_data

__all__ = [
    "MONTAGE",
    "FCAS_CHANNELS",
    "POSITIONS",
    "cnv_topography",
    "blink_topography",
    "KINDS",
    "COUNTDOWN_WIDTH",
    "STOPLIGHT_WIDTH",
    "TrialRecording",
    "TrialRejected",
    "Segment",
    "LabeledDataset",
    "GeneratorConfig",
    "derive_seed",
    "generate_participant",
    "segment_countdown",
    "segment_stoplight",
    "segment_trial",
    "pad_segment",
    "compute_class_weights",
    "class_weights_from_counts",
    "duplicate_positives",
    "augment_noise",
    "split_participants",
    "stratified_split",
    "select_channels",
    "grand_average",
    "build_dataset",
]

MONTAGE = ("Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T7", "C3", "Cz",
           "C4", "T8", "P7", "P3", "Pz", "P4", "P8", "O1", "O2")
FCAS_CHANNELS = ("Cz", "Pz", "C3", "C4", "Fz")
KINDS = ("countdown-nominal", "countdown-stressed", "stoplight")
FS = 500
COUNTDOWN_WIDTH = 996
STOPLIGHT_WIDTH = 1074
COUNTDOWN_MARKERS = ("5", "4", "3", "2", "1", "stop")

# approximate scalp grid positions (x: left to right, y: back to front), Cz at the origin
POSITIONS = {
    "Fp1": (-1, 2), "Fp2": (1, 2),
    "F7": (-2, 1), "F3": (-1, 1), "Fz": (0, 1), "F4": (1, 1), "F8": (2, 1),
    "T7": (-2, 0), "C3": (-1, 0), "Cz": (0, 0), "C4": (1, 0), "T8": (2, 0),
    "P7": (-2, -1), "P3": (-1, -1), "Pz": (0, -1), "P4": (1, -1), "P8": (2, -1),
    "O1": (-1, -2), "O2": (1, -2),
}


def cnv_topography(center=(0.0, 0.0), width: float = 1.0) -> np.ndarray:
    """Gaussian CNV gain over the montage, peaking at ``center`` (Cz for the default)."""
    xy = np.array([POSITIONS[c] for c in MONTAGE], dtype=np.float64)
    d2 = ((xy - np.asarray(center, dtype=np.float64)) ** 2).sum(axis=1)
    return np.exp(-d2 / (2.0 * width**2))


def blink_topography(width: float = 1.0) -> np.ndarray:
    """Frontal gain of ocular artifacts, 1 at Fp1/Fp2 and falling off towards the back."""
    xy = np.array([POSITIONS[c] for c in MONTAGE], dtype=np.float64)
    d2 = xy[:, 0] ** 2 + (xy[:, 1] - 3.0) ** 2
    return np.exp(-(d2 - 2.0) / (2.0 * width**2)).clip(max=1.0)


def _blinks(rng, config: GeneratorConfig, length: int) -> np.ndarray:
    """Sum of raised-cosine blink waveforms at Poisson times, unit spatial gain."""
    out = np.zeros(length)
    n = rng.poisson(config.blink_rate_hz * length / FS)
    width = max(int(config.blink_ms * FS / 1000.0), 1)
    shape = np.hanning(width)
    for at, amp in zip(rng.integers(-width // 2, length, n), rng.uniform(*config.blink_amplitude, n)):
        lo, hi = max(at, 0), min(at + width, length)
        out[lo:hi] += amp * shape[lo - at : hi - at]
    return out


def derive_seed(master: int, *keys) -> int:
    """Stable 32-bit child seed for ``(master, *keys)``; keys may be ints or strings."""
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(int.from_bytes(k.encode(), "little") % (2**63))
        else:
            words.append(int(k))
    return int(np.random.SeedSequence(int(master), spawn_key=tuple(words)).generate_state(1)[0])


class TrialRejected(ValueError):
    """A trial whose markers cannot be segmented."""


@dataclass
class TrialRecording:
    participant: int
    kind: str
    index: int
    data: np.ndarray  # (channels, samples), microvolts
    markers: list  # [(label, sample_index), ...]
    channels: tuple = MONTAGE
    fs: int = FS

    @property
    def trial_id(self) -> str:
        return f"p{self.participant:02d}-{self.kind}-{self.index:03d}"

    def marker_positions(self, label: str) -> list[int]:
        return [pos for name, pos in self.markers if name == label]


@dataclass
class Segment:
    data: np.ndarray  # int8 (channels, width)
    label: int
    trial_id: str
    participant: int = -1


@dataclass
class LabeledDataset:
    """Homogeneous stack of int8 segments, ``data`` shaped ``(N, channels, width)``."""

    data: np.ndarray
    labels: np.ndarray
    participants: np.ndarray
    trial_ids: list
    channels: tuple = MONTAGE

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.participants = np.asarray(self.participants, dtype=np.int64)
        if not (len(self.data) == len(self.labels) == len(self.participants) == len(self.trial_ids)):
            raise ValueError("dataset fields disagree in length")

    def __len__(self):
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.data.shape[-1]

    @property
    def provenance(self) -> list[int]:
        return sorted(set(self.participants.tolist()))

    def counts(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        return len(self) - pos, pos

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.data[idx], self.labels[idx], self.participants[idx],
                              [self.trial_ids[i] for i in idx], self.channels)

    def segments(self) -> list[Segment]:
        return [Segment(d, int(l), t, int(p)) for d, l, t, p in
                zip(self.data, self.labels, self.trial_ids, self.participants)]

    def as_input(self) -> np.ndarray:
        """``(N, 1, channels, width)`` view for the convolutional networks."""
        return self.data[:, None]

    @classmethod
    def from_segments(cls, segments: Sequence[Segment], channels=MONTAGE) -> "LabeledDataset":
        if not segments:
            return cls(np.zeros((0, len(channels), 0), dtype=np.int8), [], [], [], tuple(channels))
        widths = {s.data.shape for s in segments}
        if len(widths) != 1:
            raise ValueError(f"segments have mixed shapes {sorted(widths)}")
        return cls(np.stack([s.data for s in segments]).astype(np.int8),
                   [s.label for s in segments], [s.participant for s in segments],
                   [s.trial_id for s in segments], tuple(channels))

    @classmethod
    def concatenate(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return cls(np.concatenate([p.data for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.participants for p in parts]),
                   [t for p in parts for t in p.trial_ids], parts[0].channels)


@dataclass
class GeneratorConfig:
    """Parameters of the synthetic recordings.

    ``trials`` defaults to the per-participant trial counts of the three original
    experiments; :meth:`desk_scale` shrinks them for quick end-to-end runs.
    """

    participants: int = 11
    trials: dict = field(default_factory=lambda: {
        "countdown-nominal": 240, "countdown-stressed": 150, "stoplight": 90})
    cnv_amplitude: tuple = (24.0, 32.0)  # uV, drawn once per participant
    cnv_latency_ms: tuple = (100.0, 300.0)  # ramp start after the cue, per participant
    cnv_onset_jitter_ms: float = 60.0  # per-trial jitter of the ramp start
    cnv_width: float = 1.0  # spatial spread of the CNV, in electrode spacings
    focus_spread: float = 0.5  # per-participant displacement of the CNV peak from Cz
    prep_amplitude: tuple = (10.0, 16.0)  # uV, positive left fronto-temporal preparation shift
    prep_center: tuple = (-2.0, 0.5)  # between F7 and T7
    prep_width: float = 0.6
    trial_amplitude_jitter: float = 0.15
    noise_sigma: float = 10.0  # uV, white component
    drift_sigma: float = 8.0  # uV, slow per-channel component
    drift_cutoff_hz: float = 1.0
    blink_rate_hz: float = 1.5  # ocular artifacts, Poisson in time
    blink_amplitude: tuple = (45.0, 80.0)  # uV at Fp1/Fp2
    blink_ms: float = 300.0
    stress_multiplier: float = 1.5
    count_gap: tuple = (850, 996)  # samples between countdown markers
    seed: int = 0

    def __post_init__(self):
        if self.participants < 1 or any(v < 1 for v in self.trials.values()):
            raise ValueError("participant and trial counts must be positive")
        if min(self.noise_sigma, self.drift_sigma, self.blink_rate_hz) < 0 or self.stress_multiplier < 1:
            raise ValueError("noise levels must be >= 0 and stress multiplier >= 1")
        if self.count_gap[1] > COUNTDOWN_WIDTH:
            raise ValueError("countdown gaps longer than the padded width")

    @classmethod
    def desk_scale(cls, **overrides) -> "GeneratorConfig":
        base = dict(trials={"countdown-nominal": 10, "countdown-stressed": 10, "stoplight": 24})
        base.update(overrides)
        return cls(**base)


def _participant_profile(config: GeneratorConfig, participant: int) -> dict:
    rng = np.random.default_rng(derive_seed(config.seed, "participant", participant))
    return {
        "amplitude": rng.uniform(*config.cnv_amplitude),
        "latency": rng.uniform(*config.cnv_latency_ms) * FS / 1000.0,
        "channel_gain": cnv_topography(rng.normal(0.0, config.focus_spread, 2), config.cnv_width),
        "prep": rng.uniform(*config.prep_amplitude) * cnv_topography(config.prep_center, config.prep_width),
    }


def _ramp(length: int, start: int, end: int, recover: int) -> np.ndarray:
    """0 before ``start``, linear to -1 at ``end``, linear back to 0 over ``recover`` samples."""
    t = np.arange(length, dtype=np.float64)
    out = np.zeros(length)
    if end > start:
        down = (t >= start) & (t < end)
        out[down] = -(t[down] - start) / (end - start)
    up = (t >= end) & (t < end + recover)
    out[up] = -1.0 + (t[up] - end) / max(recover, 1)
    return out


def _slow_noise(rng, length: int, cutoff_hz: float) -> np.ndarray:
    """Unit-variance low-pass Gaussian noise per channel (one-pole filter, stationary start)."""
    a = math.exp(-2.0 * math.pi * cutoff_hz / FS)
    white = rng.standard_normal((len(MONTAGE), length))
    white[:, 0] /= math.sqrt(1.0 - a * a)
    out = lfilter([1.0], [1.0, -a], white, axis=1)
    return out * math.sqrt(1.0 - a * a)


def generate_participant(config: GeneratorConfig, participant: int, kind: str) -> list[TrialRecording]:
    if kind not in KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    prof = _participant_profile(config, participant)
    stressed = kind == "countdown-stressed"
    inflate = math.sqrt(config.stress_multiplier) if stressed else 1.0
    sigma = config.noise_sigma * inflate
    drift = config.drift_sigma * inflate
    amp = prof["amplitude"] * (config.stress_multiplier if stressed else 1.0)
    # the preparation shift shares the CNV time course but not its sign or scalp focus
    gain = (amp * prof["channel_gain"] - prof["prep"])[:, None]
    trials = []
    for i in range(config.trials[kind]):
        rng = np.random.default_rng(derive_seed(config.seed, "trial", participant, kind, i))
        jitter = rng.normal(0.0, config.cnv_onset_jitter_ms * FS / 1000.0)
        scale = 1.0 + config.trial_amplitude_jitter * rng.uniform(-1, 1)
        if kind == "stoplight":
            pre = int(rng.integers(300, 600))
            between = int(rng.integers(1500, 2500))
            yellow1 = pre
            red1 = yellow1 + 800
            yellow2 = red1 + between
            red2 = yellow2 + 800
            length = red2 + 800
            markers = [("yellow", yellow1), ("red", red1), ("yellow", yellow2), ("red", red2)]
            start = red1 - 200 + prof["latency"] - 100 + jitter
            shape = _ramp(length, int(round(start)), yellow1 + STOPLIGHT_WIDTH, 300)
        else:
            pre = int(rng.integers(200, 400))
            gaps = rng.integers(config.count_gap[0], config.count_gap[1] + 1, size=5)
            pos = pre + np.concatenate([[0], np.cumsum(gaps)])
            length = int(pos[-1]) + 300
            markers = list(zip(COUNTDOWN_MARKERS, pos.astype(int).tolist()))
            one, stop = int(pos[4]), int(pos[5])
            start = one + prof["latency"] + jitter
            shape = _ramp(length, int(round(min(start, stop - 50))), stop, 250)
        data = rng.normal(0.0, sigma, size=(len(MONTAGE), length))
        data += drift * _slow_noise(rng, length, config.drift_cutoff_hz)
        if config.blink_rate_hz > 0:
            blink_rng = np.random.default_rng(derive_seed(config.seed, "blink", participant, kind, i))
            data += blink_topography()[:, None] * _blinks(blink_rng, config, length)[None, :]
        data += scale * gain * shape[None, :]
        trials.append(TrialRecording(participant, kind, i, data, markers))
    return trials


def _restrict(trial: TrialRecording, channels) -> tuple[np.ndarray, tuple]:
    if channels is None:
        return trial.data, tuple(trial.channels)
    rows = _channel_rows(trial.channels, channels)
    return trial.data[rows], tuple(trial.channels[r] for r in rows)


def _channel_rows(montage: Sequence[str], channels: Iterable[str]) -> list[int]:
    channels = list(channels)
    if not channels:
        raise ValueError("channel set is empty")
    unknown = [c for c in channels if c not in montage]
    if unknown:
        raise ValueError(f"unknown channels {unknown}")
    wanted = set(channels)
    return [i for i, c in enumerate(montage) if c in wanted]


def pad_segment(seg: Segment, width: int = COUNTDOWN_WIDTH) -> Segment:
    """Append zero columns on the right up to ``width``."""
    cur = seg.data.shape[-1]
    if cur > width:
        raise ValueError(f"segment width {cur} exceeds target {width}")
    if cur == width:
        return seg
    data = np.zeros(seg.data.shape[:-1] + (width,), dtype=seg.data.dtype)
    data[..., :cur] = seg.data
    return replace(seg, data=data)


def segment_countdown(trial: TrialRecording, channels=None, width: int = COUNTDOWN_WIDTH) -> list[Segment]:
    """Cut the four inter-count windows (label 0) and the 1-to-stop window (label 1).

    Channel restriction happens before the per-segment int8 quantization.
    """
    pos = {}
    for name in COUNTDOWN_MARKERS:
        found = trial.marker_positions(name)
        if len(found) != 1:
            raise TrialRejected(f"{trial.trial_id}: expected one '{name}' marker, found {len(found)}")
        pos[name] = found[0]
    seq = [pos[n] for n in COUNTDOWN_MARKERS]
    if any(b <= a for a, b in zip(seq, seq[1:])):
        raise TrialRejected(f"{trial.trial_id}: countdown markers out of order")
    data, _ = _restrict(trial, channels)
    segs = []
    for k, (a, b) in enumerate(zip(seq, seq[1:])):
        if b - a > width:
            raise TrialRejected(f"{trial.trial_id}: window {COUNTDOWN_MARKERS[k]}->"
                                f"{COUNTDOWN_MARKERS[k + 1]} is {b - a} samples, wider than {width}")
        seg = Segment(quantize_data(data[:, a:b]), int(k == 4), trial.trial_id, trial.participant)
        segs.append(pad_segment(seg, width))
    return segs


def segment_stoplight(trial: TrialRecording, channels=None, width: int = STOPLIGHT_WIDTH) -> list[Segment]:
    """Stop-light window (label 1) and pass-through window (label 0), each ``width`` samples from yellow."""
    yellows, reds = trial.marker_positions("yellow"), trial.marker_positions("red")
    if len(yellows) != 2 or len(reds) != 2:
        raise TrialRejected(f"{trial.trial_id}: expected two yellow/red marker pairs")
    if not (yellows[0] < reds[0] < yellows[1] < reds[1]):
        raise TrialRejected(f"{trial.trial_id}: light markers out of order")
    data, _ = _restrict(trial, channels)
    segs = []
    for label, y in ((1, yellows[0]), (0, yellows[1])):
        if y + width > data.shape[1]:
            raise TrialRejected(f"{trial.trial_id}: recording ends inside a light window")
        segs.append(Segment(quantize_data(data[:, y : y + width]), label, trial.trial_id, trial.participant))
    return segs


def segment_trial(trial: TrialRecording, channels=None) -> list[Segment]:
    if trial.kind == "stoplight":
        return segment_stoplight(trial, channels)
    return segment_countdown(trial, channels)


def build_dataset(trials: Sequence[TrialRecording], channels=None, rejected: Optional[list] = None) -> LabeledDataset:
    """Segment every trial; rejected trials are skipped and their reasons collected."""
    segs = []
    for trial in trials:
        try:
            segs.extend(segment_trial(trial, channels))
        except TrialRejected as exc:
            if rejected is not None:
                rejected.append(str(exc))
    montage = trials[0].channels if trials else MONTAGE
    names = tuple(montage[r] for r in _channel_rows(montage, channels)) if channels else tuple(montage)
    return LabeledDataset.from_segments(segs, names)


def class_weights_from_counts(total: int, counts: Sequence[int]) -> tuple[float, ...]:
    if any(c <= 0 for c in counts):
        raise ValueError("every class needs at least one example")
    return tuple(total / (2.0 * c) for c in counts)


def compute_class_weights(dataset: LabeledDataset) -> tuple[float, float]:
    """Inverse-frequency weights ``N / (2 N_c)`` indexed by class id."""
    neg, pos = dataset.counts()
    return class_weights_from_counts(len(dataset), (neg, pos))


def duplicate_positives(dataset: LabeledDataset, copies: int = 3) -> LabeledDataset:
    """Append ``copies`` extra copies of every positive segment after the originals."""
    pos = np.flatnonzero(dataset.labels == 1)
    if copies <= 0 or pos.size == 0:
        return dataset
    idx = np.concatenate([np.arange(len(dataset))] + [pos] * copies)
    return dataset.subset(idx)


def augment_noise(dataset: LabeledDataset, k: int = 4, seed: int = 0) -> LabeledDataset:
    """Add ``k`` noisy copies per segment (rounded unit Gaussian, clamped to int8 range)."""
    if k <= 0:
        return dataset
    rng = np.random.default_rng(seed)
    base = dataset.data.astype(np.int16)
    copies = [dataset.data]
    for _ in range(k):
        noise = np.rint(rng.standard_normal(base.shape)).astype(np.int16)
        copies.append(np.clip(base + noise, -127, 127).astype(np.int8))
    return LabeledDataset(np.concatenate(copies), np.tile(dataset.labels, k + 1),
                          np.tile(dataset.participants, k + 1), list(dataset.trial_ids) * (k + 1),
                          dataset.channels)


def split_participants(ids: Sequence[int], seed: int = 0, repeats: int = 10,
                       group_size: int = 8) -> list[tuple[list[int], list[int]]]:
    """Seeded group/individual splits (8/3) where every id is held out at least once."""
    ids = list(ids)
    if len(ids) != 11:
        raise ValueError(f"expected 11 participant ids, got {len(ids)}")
    n_ind = len(ids) - group_size
    if repeats * n_ind < len(ids):
        raise ValueError("too few repeats to hold out every participant")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    individuals = []
    for start in range(0, len(ids), n_ind):
        chunk = order[start : start + n_ind]
        if len(chunk) < n_ind:
            rest = [p for p in ids if p not in chunk]
            chunk += [rest[i] for i in rng.choice(len(rest), n_ind - len(chunk), replace=False)]
        individuals.append(chunk)
    while len(individuals) < repeats:
        individuals.append([ids[i] for i in rng.choice(len(ids), n_ind, replace=False)])
    individuals = [individuals[i] for i in rng.permutation(len(individuals))]
    return [([p for p in ids if p not in ind], sorted(ind)) for ind in individuals[:repeats]]


def stratified_split(labels, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded shuffle; ``round(test_fraction * n_c)`` of each class goes to test."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train, test = [np.zeros(0, np.int64)], [np.zeros(0, np.int64)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(math.floor(test_fraction * idx.size + 0.5))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def select_channels(dataset: LabeledDataset, channels: Iterable[str]) -> LabeledDataset:
    """Keep only the named rows, in montage order."""
    rows = _channel_rows(dataset.channels, channels)
    return LabeledDataset(dataset.data[:, rows], dataset.labels, dataset.participants,
                          list(dataset.trial_ids), tuple(dataset.channels[r] for r in rows))


def grand_average(trials: Sequence[TrialRecording], channel: str, marker: str,
                  occurrence: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Marker-aligned mean of one channel over the support shared by all trials.

    Returns ``(lags, waveform)`` where ``lags`` are sample offsets from the marker.
    """
    if not trials:
        raise ValueError("no trials to average")
    rows, offsets, lengths = [], [], []
    for t in trials:
        if channel not in t.channels:
            raise ValueError(f"{t.trial_id} has no channel {channel}")
        found = t.marker_positions(marker)
        if len(found) <= occurrence:
            raise ValueError(f"{t.trial_id} has no marker {marker!r} #{occurrence}")
        rows.append(t.data[t.channels.index(channel)])
        offsets.append(found[occurrence])
        lengths.append(t.data.shape[1])
    before = min(offsets)
    after = min(n - o for n, o in zip(lengths, offsets))
    stack = np.stack([r[o - before : o + after] for r, o in zip(rows, offsets)])
    return np.arange(-before, after), stack.mean(axis=0)
