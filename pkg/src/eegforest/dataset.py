"""Corpus ingestion, frequency groups, window labelling and splitting.

On-disk corpus layout: one signal file per recording plus a sidecar
annotation file with the same basename::

    p000_r000.csv       # fs=250 patient=p000
                        time_s,F7-T3,T3-T5,...
                        0,1.25,-3.5,...
    p000_r000.ann.csv   channel,start_s,stop_s,label
                        1,12.5,15.75,3

Annotation times are in seconds, so resampling never touches them.
"""
from __future__ import annotations

import enum
import io
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, InvalidArgumentError
from .features import (FEATURES_PER_CHANNEL, Recording, decimate, feature_names,
                       linear_resample, window_array, window_features)


N_LABELS = 13  # background + 12 artifact classes
MAX_LABEL = N_LABELS - 1
KNOWN_RATES = (250, 256, 400, 512, 1000)
DEFAULT_MONTAGE = ("F7-T3", "T3-T5", "F8-T4", "T4-T6")

_SIGNAL_SUFFIX = ".csv"
_ANN_SUFFIX = ".ann.csv"
_META_RE = re.compile(r"^#\s*fs=(\d+)\s+patient=(\S+)\s*$")


class LabelScheme(enum.Enum):
    BC = "bc"
    MC = "mc"
    MMC = "mmc"

    @property
    def code(self):
        return {"bc": 0, "mc": 1, "mmc": 2}[self.value]

    @classmethod
    def from_code(cls, code):
        for scheme in cls:
            if scheme.code == code:
                return scheme
        raise InvalidArgumentError(f"unknown label scheme code {code}")

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown label scheme {value!r}") from None

    def arity(self, n_channels):
        return 1 if self is LabelScheme.BC else n_channels

    @property
    def n_classes(self):
        return N_LABELS if self is LabelScheme.MMC else 2


class FrequencyGroup(enum.Enum):
    A = "a"
    B = "b"
    C = "c"
    D = "d"
    E = "e"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgumentError(f"unknown frequency group {value!r}") from None


@dataclass(frozen=True, order=True)
class Annotation:
    channel_index: int
    start_s: float
    stop_s: float
    label: int

    def __post_init__(self):
        if not 0 <= self.start_s < self.stop_s:
            raise InvalidArgumentError(
                f"annotation needs 0 <= start < stop, got [{self.start_s}, {self.stop_s})")
        if not 0 <= self.label <= MAX_LABEL:
            raise InvalidArgumentError(f"label {self.label} outside 0..{MAX_LABEL}")
        if self.channel_index < 0:
            raise InvalidArgumentError(f"negative channel index {self.channel_index}")


@dataclass(frozen=True, eq=False)
class AnnotatedRecording(Recording):
    annotations: tuple = ()
    name: str = ""

    def __post_init__(self):
        super().__post_init__()
        anns = tuple(self.annotations)
        for ann in anns:
            if ann.channel_index >= self.n_channels:
                raise InvalidArgumentError(
                    f"annotation on channel {ann.channel_index} of a "
                    f"{self.n_channels}-channel recording")
        object.__setattr__(self, "annotations", anns)
        if not self.name:
            object.__setattr__(self, "name", f"{self.patient_id}_r000")

    def with_signal(self, channels, fs):
        return AnnotatedRecording(channels, fs, self.channel_names, self.patient_id,
                                  self.annotations, self.name)


# -- file formats ---------------------------------------------------------------

def _fmt(v):
    return format(float(v), ".9g")


def write_recording(recording, directory):
    """Write ``<name>.csv`` and ``<name>.ann.csv``; returns the signal path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sig_path = directory / (recording.name + _SIGNAL_SUFFIX)
    buf = io.StringIO()
    buf.write(f"# fs={recording.fs} patient={recording.patient_id}\n")
    buf.write(",".join(("time_s",) + recording.channel_names) + "\n")
    t = np.arange(recording.n_samples) / recording.fs
    table = np.column_stack([t, recording.channels.T])
    np.savetxt(buf, table, fmt="%.9g", delimiter=",")
    sig_path.write_text(buf.getvalue())

    lines = ["channel,start_s,stop_s,label"]
    for ann in sorted(recording.annotations):
        lines.append(f"{ann.channel_index},{_fmt(ann.start_s)},{_fmt(ann.stop_s)},{ann.label}")
    (directory / (recording.name + _ANN_SUFFIX)).write_text("\n".join(lines) + "\n")
    return sig_path


def _locate_bad_row(path, lines, first_line_no, n_cols):
    for offset, raw in enumerate(lines):
        parts = raw.strip().split(",")
        if raw.strip() == "":
            continue
        if len(parts) != n_cols:
            return first_line_no + offset, f"expected {n_cols} fields, got {len(parts)}"
        try:
            [float(p) for p in parts]
        except ValueError:
            return first_line_no + offset, f"non-numeric field in {raw.strip()!r}"
    return None, "unparseable signal data"


def load_recording(path):
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if len(lines) < 2:
        raise DataFormatError("missing metadata or header line", path, len(lines) + 1)
    meta = _META_RE.match(lines[0])
    if not meta:
        raise DataFormatError("first line must read '# fs=<int> patient=<id>'", path, 1)
    fs, patient = int(meta.group(1)), meta.group(2)
    header = lines[1].strip().split(",")
    if header[0] != "time_s" or len(header) < 2:
        raise DataFormatError("header must be 'time_s,<channel>,...'", path, 2)
    names = tuple(header[1:])
    body = lines[2:]
    try:
        data = np.loadtxt(io.StringIO("\n".join(body)), delimiter=",", ndmin=2,
                          dtype=np.float64)
    except ValueError:
        line_no, why = _locate_bad_row(path, body, 3, len(header))
        raise DataFormatError(why, path, line_no) from None
    if data.shape[0] == 0:
        raise DataFormatError("no samples", path, 3)
    if data.shape[1] != len(header):
        line_no, why = _locate_bad_row(path, body, 3, len(header))
        raise DataFormatError(why, path, line_no)
    if not np.all(np.isfinite(data)):
        raise DataFormatError("non-finite sample value", path)

    annotations = _load_annotations(path.with_name(path.name[: -len(_SIGNAL_SUFFIX)] + _ANN_SUFFIX),
                                    len(names))
    try:
        return AnnotatedRecording(data[:, 1:].T, fs, names, patient, annotations,
                                  path.name[: -len(_SIGNAL_SUFFIX)])
    except InvalidArgumentError as exc:
        raise DataFormatError(str(exc), path) from None


def _load_annotations(path, n_channels):
    if not path.exists():
        raise DataFormatError("missing annotation sidecar", path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != "channel,start_s,stop_s,label":
        raise DataFormatError("header must be 'channel,start_s,stop_s,label'", path, 1)
    anns = []
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        parts = raw.strip().split(",")
        if len(parts) != 4:
            raise DataFormatError(f"expected 4 fields, got {len(parts)}", path, line_no)
        try:
            ch, start, stop, label = int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])
        except ValueError:
            raise DataFormatError(f"cannot parse {raw.strip()!r}", path, line_no) from None
        if not 0 <= label <= MAX_LABEL:
            raise DataFormatError(f"unknown label id {label}", path, line_no)
        if not 0 <= ch < n_channels:
            raise DataFormatError(
                f"channel {ch} out of range for {n_channels} channels", path, line_no)
        try:
            anns.append(Annotation(ch, start, stop, label))
        except InvalidArgumentError as exc:
            raise DataFormatError(str(exc), path, line_no) from None
    return tuple(anns)


def load_corpus(path, threads=1):
    """Load every ``*.csv`` recording (sorted by name) under a directory."""
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError("corpus directory not found", root)
    files = sorted(p for p in root.iterdir()
                   if p.name.endswith(_SIGNAL_SUFFIX) and not p.name.endswith(_ANN_SUFFIX))
    if threads > 1 and len(files) > 1:
        with ThreadPoolExecutor(threads) as pool:
            corpus = list(pool.map(load_recording, files))
    else:
        corpus = [load_recording(f) for f in files]
    for path, rec in zip(files, corpus):
        if rec.n_channels != corpus[0].n_channels:
            raise DataFormatError(f"{rec.n_channels} channels, but {files[0].name} has "
                                  f"{corpus[0].n_channels}", path, 2)
    return corpus


def write_corpus(corpus, directory):
    for rec in corpus:
        write_recording(rec, directory)


# -- frequency groups -----------------------------------------------------------

_GROUP_RATES = {
    FrequencyGroup.A: {250: 1},
    FrequencyGroup.B: {250: 1, 1000: 4},
    FrequencyGroup.C: {256: 1},
    FrequencyGroup.D: {256: 1, 512: 2},
}


def extract_group(corpus, group):
    """Filter and resample a corpus to one of the uniform-rate groups A-E."""
    group = FrequencyGroup.parse(group)
    out = []
    for rec in corpus:
        if rec.fs not in KNOWN_RATES:
            raise DataFormatError(f"recording {rec.name!r} has unsupported rate {rec.fs} Hz")
        if group is FrequencyGroup.E:
            if rec.fs == 250:
                out.append(rec)
            else:
                out.append(rec.with_signal(linear_resample(rec.channels, rec.fs, 250), 250))
            continue
        factor = _GROUP_RATES[group].get(rec.fs)
        if factor is None:
            continue
        if factor == 1:
            out.append(rec)
        else:
            out.append(rec.with_signal(decimate(rec.channels, factor), rec.fs // factor))
    return out


# -- labels -------------------------------------------------------------------------

def _window_bounds(windows):
    starts = np.array([w.start_time for w in windows], dtype=np.float64)
    stops = np.array([w.stop_time for w in windows], dtype=np.float64)
    return starts, stops


def assign_labels(recording, scheme, windows=None):
    """Label windows under BC, MC or MMC.

    A window counts an annotation when their time intervals intersect with
    positive length.  In MMC, competing artifact annotations on one channel
    are resolved by the larger overlap, then by the smaller label id.
    Returns an int array of shape ``(n_windows, arity)``.
    """
    scheme = LabelScheme.parse(scheme)
    if windows is None:
        n = recording.n_samples // recording.fs
        starts = np.arange(n, dtype=np.float64)
        stops = starts + 1.0
    elif isinstance(windows, tuple) and len(windows) == 2:
        starts, stops = (np.asarray(a, dtype=np.float64) for a in windows)
    else:
        starts, stops = _window_bounds(windows)
    n_ch = recording.n_channels
    best_ov = np.zeros((starts.size, n_ch))
    best_label = np.zeros((starts.size, n_ch), dtype=np.int64)
    for ann in recording.annotations:
        if ann.label == 0:
            continue
        ov = np.minimum(stops, ann.stop_s) - np.maximum(starts, ann.start_s)
        cur_ov = best_ov[:, ann.channel_index]
        cur_label = best_label[:, ann.channel_index]
        wins = (ov > 0) & ((ov > cur_ov) | ((ov == cur_ov) & (ann.label < cur_label)))
        cur_ov[wins] = ov[wins]
        cur_label[wins] = ann.label
    if scheme is LabelScheme.MMC:
        return best_label
    per_channel = (best_label > 0).astype(np.int64)
    if scheme is LabelScheme.MC:
        return per_channel
    return per_channel.any(axis=1, keepdims=True).astype(np.int64)


# -- splitting ----------------------------------------------------------------------

def _window_count(rec):
    return rec.n_samples // rec.fs


def split_patient_independent(corpus, ratios=(0.8, 0.1, 0.1), seed=0):
    """Assign whole patients to train/val/test.

    Patients are visited in a seeded random order and each goes to the split
    with the largest remaining window-count deficit; once the patients left
    only suffice to fill the still-empty splits, those get them.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise InvalidArgumentError(f"need three positive split ratios, got {tuple(ratios)}")
    ratios = ratios / ratios.sum()
    by_patient = {}
    for rec in corpus:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise InvalidArgumentError(
            f"patient-independent split needs at least 3 patients, got {len(patients)}")
    order = [patients[i] for i in np.random.default_rng(seed).permutation(len(patients))]
    counts = {p: sum(_window_count(r) for r in by_patient[p]) for p in patients}
    target = ratios * sum(counts.values())
    assigned = np.zeros(3)
    members = [[], [], []]
    for i, patient in enumerate(order):
        remaining = len(order) - i
        empty = [s for s in range(3) if not members[s]]
        if empty and remaining <= len(empty):
            split = empty[0]
        else:
            split = int(np.argmax(target - assigned))
        members[split].append(patient)
        assigned[split] += counts[patient]
    return tuple([r for p in sorted(m) for r in by_patient[p]] for m in members)


# -- synthetic corpus ------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_patients: int = 8
    n_channels: int = 4
    fs: int = 250
    duration_s: float = 600.0
    artifact_rate: float = 0.3
    class_count: int = 3
    seed: int = 0
    mean_event_s: float = 4.0
    artifact_gain: float = 1.0
    miss_rate: float = 0.1

    def validate(self):
        if self.n_patients < 1 or self.n_channels < 1:
            raise InvalidArgumentError("need at least one patient and one channel")
        if self.fs <= 0 or self.duration_s <= 0:
            raise InvalidArgumentError("fs and duration must be positive")
        if not 0 <= self.artifact_rate < 1:
            raise InvalidArgumentError("artifact_rate must lie in [0, 1)")
        if not 0 <= self.miss_rate < 1:
            raise InvalidArgumentError("miss_rate must lie in [0, 1)")
        if not 1 <= self.class_count <= MAX_LABEL:
            raise InvalidArgumentError(f"class_count must lie in 1..{MAX_LABEL}")


def _band_noise(rng, n, fs, lo, hi):
    spec = np.zeros(n // 2 + 1, dtype=np.complex128)
    freqs = np.arange(spec.size) * fs / n
    band = (freqs >= lo) & (freqs <= hi)
    spec[band] = rng.standard_normal(band.sum()) + 1j * rng.standard_normal(band.sum())
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _signature(label, rng, n, fs):
    """Class-specific artifact waveform; the kind cycles through three families."""
    kind = (label - 1) % 3
    tier = (label - 1) // 3
    t = np.arange(n) / fs
    if kind == 0:
        # muscle-like high-band burst above 80 Hz
        lo = min(82.0 + 6.0 * tier, 0.45 * fs - 10.0)
        hi = min(lo + 15.0 + 10.0 * tier, 0.49 * fs)
        return (12.0 + 4.0 * tier) * rng.uniform(0.8, 1.2) * _band_noise(rng, n, fs, lo, hi)
    if kind == 1:
        # electrode pops: random-telegraph step offsets
        amp = (45.0 + 15.0 * tier) * rng.uniform(0.8, 1.2)
        flips = rng.random(n) < (4.0 + tier) / fs
        level = np.cumsum(flips) % 2
        return amp * (level - level.mean())
    # slow large swings (eye movement)
    freq = rng.uniform(1.0, 3.0) + tier
    amp = (120.0 + 40.0 * tier) * rng.uniform(0.8, 1.2)
    tri = 2.0 * np.abs(2.0 * ((freq * t + rng.random()) % 1.0) - 1.0) - 1.0
    return amp * tri


def synth_corpus(config=None, **overrides):
    """Generate a seeded synthetic corpus with annotated artifact events.

    Background is a sum of random tones below 40 Hz plus white noise.  Events
    of random class cover roughly ``artifact_rate`` of each recording and hit
    a random non-empty subset of channels.  A ``miss_rate`` fraction of events
    is injected into the signal but left unannotated, mimicking incomplete
    expert labels.
    """
    cfg = config or SynthConfig()
    if overrides:
        cfg = SynthConfig(**{**cfg.__dict__, **overrides})
    cfg.validate()
    fs = int(cfg.fs)
    n = int(round(cfg.duration_s * fs))
    names = DEFAULT_MONTAGE if cfg.n_channels == len(DEFAULT_MONTAGE) else tuple(
        f"ch{i}" for i in range(cfg.n_channels))
    t = np.arange(n) / fs
    corpus = []
    for p, ss in enumerate(np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)):
        rng = np.random.default_rng(ss)
        scale = rng.uniform(0.9, 1.1)
        channels = np.empty((cfg.n_channels, n))
        for c in range(cfg.n_channels):
            k = 6
            freqs = rng.uniform(0.5, 40.0, k)
            # roughly 1/f amplitudes, as in resting EEG
            amps = rng.uniform(10.0, 20.0, k) * scale / (1.0 + freqs / 4.0)
            phases = rng.uniform(0, 2 * np.pi, k)
            tones = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t + phases[:, None])).sum(0)
            channels[c] = tones + rng.normal(0.0, 2.0 * scale, n)

        annotations = []
        if cfg.artifact_rate > 0:
            mean_gap = cfg.mean_event_s * (1 - cfg.artifact_rate) / cfg.artifact_rate
            pos = 0.0
            while True:
                pos += rng.exponential(mean_gap)
                dur = rng.uniform(0.5, 1.5) * cfg.mean_event_s
                start = math.floor(pos * 4) / 4
                stop = min(start + math.floor(dur * 4) / 4, n / fs)
                if stop - start < 0.25:
                    break
                label = int(rng.integers(1, cfg.class_count + 1))
                mask = rng.random(cfg.n_channels) < 0.5
                if not mask.any():
                    mask[rng.integers(cfg.n_channels)] = True
                annotated = rng.random() >= cfg.miss_rate
                i0, i1 = int(round(start * fs)), int(round(stop * fs))
                for c in np.flatnonzero(mask):
                    channels[c, i0:i1] += cfg.artifact_gain * _signature(label, rng, i1 - i0, fs)
                    if annotated:
                        annotations.append(Annotation(int(c), start, stop, label))
                pos = stop
        corpus.append(AnnotatedRecording(channels, fs, names, f"p{p:03d}", tuple(annotations),
                                         f"p{p:03d}_r000"))
    return corpus


# -- feature table ------------------------------------------------------------------------

@dataclass
class FeatureTable:
    """Per-window features and labels for all three schemes.

    ``labels`` maps each scheme to an int array of shape ``(n_windows, arity)``.
    """

    patients: list
    recordings: list
    starts: np.ndarray
    X: np.ndarray
    channel_names: tuple
    labels: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_channels(self):
        return len(self.channel_names)

    def y(self, scheme):
        scheme = LabelScheme.parse(scheme)
        if scheme not in self.labels:
            raise DataFormatError(f"feature table carries no {scheme.value} labels")
        y = self.labels[scheme]
        return y[:, 0] if scheme is LabelScheme.BC else y

    def subset(self, mask):
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return FeatureTable([self.patients[i] for i in idx], [self.recordings[i] for i in idx],
                            self.starts[idx], self.X[idx], self.channel_names,
                            {k: v[idx] for k, v in self.labels.items()})

    def to_csv(self, path):
        cols = ["patient", "recording", "start_s"] + feature_names(self.channel_names)
        cols.append("bc")
        cols += [f"mc_{i}" for i in range(self.n_channels)]
        cols += [f"mmc_{i}" for i in range(self.n_channels)]
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        bc = self.labels.get(LabelScheme.BC)
        mc = self.labels.get(LabelScheme.MC)
        mmc = self.labels.get(LabelScheme.MMC)
        for i in range(len(self)):
            row = [self.patients[i], self.recordings[i], repr(float(self.starts[i]))]
            row += [repr(float(v)) for v in self.X[i]]
            row.append(str(int(bc[i, 0])))
            row += [str(int(v)) for v in mc[i]]
            row += [str(int(v)) for v in mmc[i]]
            buf.write(",".join(row) + "\n")
        Path(path).write_text(buf.getvalue())

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataFormatError("feature table not found", path)
        lines = path.read_text().splitlines()
        if not lines:
            raise DataFormatError("empty feature table", path, 1)
        header = lines[0].split(",")
        if header[:3] != ["patient", "recording", "start_s"]:
            raise DataFormatError("header must start with 'patient,recording,start_s'", path, 1)
        n_feat = sum(1 for h in header if h.endswith(("_fft_hi", "_d1", "_d2", "_d3", "_d4")))
        if n_feat % FEATURES_PER_CHANNEL:
            raise DataFormatError(f"{n_feat} feature columns is not a multiple of 5", path, 1)
        n_ch = n_feat // FEATURES_PER_CHANNEL
        channels = tuple(header[3 + c * FEATURES_PER_CHANNEL].rsplit("_fft_hi", 1)[0]
                         for c in range(n_ch))
        expected = 3 + n_feat + 1 + 2 * n_ch
        if len(header) != expected:
            raise DataFormatError(f"expected {expected} columns, got {len(header)}", path, 1)
        patients, recs, starts, X, labels = [], [], [], [], []
        for line_no, raw in enumerate(lines[1:], start=2):
            if not raw:
                continue
            parts = raw.split(",")
            if len(parts) != expected:
                raise DataFormatError(f"expected {expected} fields, got {len(parts)}", path,
                                      line_no)
            try:
                starts.append(float(parts[2]))
                X.append([float(v) for v in parts[3:3 + n_feat]])
                labels.append([int(v) for v in parts[3 + n_feat:]])
            except ValueError:
                raise DataFormatError("non-numeric field", path, line_no) from None
            patients.append(parts[0])
            recs.append(parts[1])
        X = np.asarray(X, dtype=np.float64).reshape(len(patients), n_feat)
        lab = np.asarray(labels, dtype=np.int64).reshape(len(patients), 1 + 2 * n_ch)
        return cls(patients, recs, np.asarray(starts, dtype=np.float64), X, channels, {
            LabelScheme.BC: lab[:, :1],
            LabelScheme.MC: lab[:, 1:1 + n_ch],
            LabelScheme.MMC: lab[:, 1 + n_ch:],
        })


def _recording_rows(rec):
    windows = window_array(rec)
    X = window_features(windows, rec.fs) if len(windows) else np.empty(
        (0, rec.n_channels * FEATURES_PER_CHANNEL))
    labels = {s: assign_labels(rec, s) for s in LabelScheme}
    return X, labels


def build_feature_table(corpus, threads=1):
    """Window, featurise and label every recording, preserving corpus order."""
    if not corpus:
        return FeatureTable([], [], np.empty(0), np.empty((0, 0)), (), {
            s: np.empty((0, 0), dtype=np.int64) for s in LabelScheme})
    names = corpus[0].channel_names
    for rec in corpus:
        if rec.n_channels != len(names):
            raise DataFormatError(
                f"recording {rec.name!r} has {rec.n_channels} channels, expected {len(names)}")
    if threads > 1 and len(corpus) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(_recording_rows, corpus))
    else:
        parts = [_recording_rows(r) for r in corpus]
    patients, recs, starts = [], [], []
    for rec, (X, _) in zip(corpus, parts):
        patients += [rec.patient_id] * len(X)
        recs += [rec.name] * len(X)
        starts.append(np.arange(len(X), dtype=np.float64))
    return FeatureTable(
        patients, recs, np.concatenate(starts), np.concatenate([p[0] for p in parts]), names,
        {s: np.concatenate([p[1][s] for p in parts]) for s in LabelScheme})
