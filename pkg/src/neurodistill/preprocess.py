"""Raw-signal pipeline: broadband to LFP, spike binning, z-scoring, segmentation.

The filter cascade is zero-phase (forward-backward) so LFP stays aligned
with behavior; each stage is a 4th-order IIR run through sosfiltfilt.
Stage order: notch at 60 Hz harmonics up to the original Nyquist, high-pass
at 0.05 Hz, low-pass at 50 Hz, common average referencing, then decimation
to 100 Hz (10 ms bins). Spikes are binned in 10 ms half-open windows and
units below 1 Hz are dropped. Z-scoring stores per-dim stats so inference
can reuse them (zero-spike imputation needs the spike means).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal


@dataclass
class BroadbandRecording:
    samples: np.ndarray  # [N, channels]
    sample_rate: float

    def __post_init__(self):
        if self.sample_rate <= 100.0:
            raise ValueError("broadband sample rate must exceed 100 Hz")
        if self.samples.ndim != 2:
            raise ValueError("samples must be [N, channels]")


@dataclass
class FilterSpec:
    notch_base: float = 60.0
    notch_q: float = 30.0
    highpass_cut: float = 0.05
    lowpass_cut: float = 50.0
    target_rate: float = 100.0
    order: int = 4

    def validate(self):
        # the default cutoff sits exactly at the target Nyquist, which is
        # the usual anti-aliasing arrangement, so equality is allowed
        if self.lowpass_cut > self.target_rate / 2:
            raise ValueError("lowpass_cut must not exceed the target Nyquist")
        return self


def broadband_to_lfp(rec, spec=None):
    """Filter cascade plus CAR plus decimation; returns floats at target_rate."""
    spec = (spec or FilterSpec()).validate()
    x = np.asarray(rec.samples, dtype=np.float64)
    if x.shape[1] < 2:
        raise ValueError("common average referencing needs at least 2 channels")
    fs = float(rec.sample_rate)

    f0 = spec.notch_base
    while f0 < fs / 2:
        b, a = signal.iirnotch(f0, spec.notch_q, fs=fs)
        x = signal.filtfilt(b, a, x, axis=0)
        f0 += spec.notch_base

    sos_hp = signal.butter(spec.order, spec.highpass_cut, "highpass", fs=fs, output="sos")
    x = signal.sosfiltfilt(sos_hp, x, axis=0)
    sos_lp = signal.butter(spec.order, spec.lowpass_cut, "lowpass", fs=fs, output="sos")
    x = signal.sosfiltfilt(sos_lp, x, axis=0)

    x = x - x.mean(axis=1, keepdims=True)  # CAR

    step = fs / spec.target_rate
    if abs(step - round(step)) < 1e-9:
        x = x[:: int(round(step))]
    else:
        n_out = int(round(x.shape[0] * spec.target_rate / fs))
        warnings.warn(
            f"sample rate {fs} is not an integer multiple of {spec.target_rate}; resampling",
            RuntimeWarning,
            stacklevel=2,
        )
        x = signal.resample(x, n_out, axis=0)
    return x.astype(np.float32)


def bin_spikes(spike_times, duration, bin_ms=10.0, min_rate_hz=1.0):
    """Count spikes in half-open 10 ms bins and drop sub-threshold units.

    spike_times: list of per-unit sorted arrays (seconds). Returns
    (counts [T, kept_units], kept mask over the original unit order).
    Events past the last whole bin are discarded with the partial bin.
    """
    bin_s = bin_ms / 1000.0
    n_bins = int(np.floor(duration / bin_s + 1e-9))
    if n_bins < 1:
        raise ValueError("duration shorter than one bin")
    cols = []
    kept = np.zeros(len(spike_times), dtype=bool)
    for u, times in enumerate(spike_times):
        times = np.asarray(times, dtype=np.float64)
        if times.size and times.min() < 0:
            raise ValueError(f"unit {u} has negative spike times")
        counts = np.zeros(n_bins, dtype=np.int64)
        idx = np.floor(times / bin_s).astype(np.int64)
        idx = idx[idx < n_bins]
        np.add.at(counts, idx, 1)
        rate = counts.sum() / (n_bins * bin_s)
        if rate >= min_rate_hz:
            kept[u] = True
            cols.append(counts)
    if not cols:
        return np.zeros((n_bins, 0), dtype=np.int64), kept
    return np.stack(cols, axis=1), kept


def zscore(x):
    """Per-dim standardization; returns (z, mean, std).

    A zero-variance dim is centered and its std recorded as 1 (with a
    warning) so the transform stays invertible.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("z-scoring needs at least 2 samples")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    flat = std == 0
    if np.any(flat):
        warnings.warn(
            f"{int(flat.sum())} zero-variance dims left centered", RuntimeWarning, stacklevel=2
        )
        std = np.where(flat, 1.0, std)
    return ((x - mean) / std).astype(np.float32), mean, std


def apply_zscore(x, mean, std):
    return ((np.asarray(x, dtype=np.float64) - mean) / std).astype(np.float32)


def undo_zscore(z, mean, std):
    return np.asarray(z, dtype=np.float64) * std + mean


def segment(arrays, seq_len_bins):
    """Cut aligned [T, D] arrays into non-overlapping windows.

    arrays: dict name -> array sharing T. Returns a dict name ->
    [n_seq, seq_len_bins, D]; the final partial window is dropped.
    """
    lengths = {name: arr.shape[0] for name, arr in arrays.items()}
    if len(set(lengths.values())) != 1:
        raise ValueError(f"modalities disagree on T: {lengths}")
    t_total = next(iter(lengths.values()))
    if t_total < seq_len_bins:
        raise ValueError(f"T={t_total} shorter than one sequence ({seq_len_bins})")
    n_seq = t_total // seq_len_bins
    out = {}
    for name, arr in arrays.items():
        cut = arr[: n_seq * seq_len_bins]
        out[name] = cut.reshape(n_seq, seq_len_bins, *arr.shape[1:])
    return out


def split_sequences(n_seq, train_frac=0.8, seed=0):
    """Random sequence-level split; deterministic in the seed."""
    if n_seq < 2:
        raise ValueError("need at least 2 sequences to split")
    order = np.random.default_rng(seed).permutation(n_seq)
    n_train = int(round(train_frac * n_seq))
    n_train = min(max(n_train, 1), n_seq - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class SessionRecord:
    """One session, segmented and standardized, ready for tokenization.

    spikes stay raw counts (their embedding is a lookup table); lfp and
    behavior are z-scored with the train-split statistics recorded here.
    true_latents ride along for the evaluation oracle only.
    """

    session_id: str
    spikes: np.ndarray  # [n_seq, L, n_s] counts
    lfp: np.ndarray  # [n_seq, L, n_y] z-scored
    behavior: np.ndarray  # [n_seq, L, n_b] z-scored
    train_idx: np.ndarray
    test_idx: np.ndarray
    stats: dict = field(default_factory=dict)  # per-modality (mean, std)
    true_latents: np.ndarray | None = None

    @property
    def n_neurons(self):
        return self.spikes.shape[2]

    @property
    def n_lfp(self):
        return self.lfp.shape[2]

    @property
    def seq_len(self):
        return self.spikes.shape[1]

    def sequences(self, split):
        idx = {"train": self.train_idx, "test": self.test_idx}[split]
        return idx


def prepare_session(session, seq_len_bins=None, train_frac=0.8, split_seed=0):
    """SyntheticSession (or equivalent) -> SessionRecord.

    Z-scoring stats come from the train split only, then standardize both
    splits; spike means/stds are recorded (not applied) so zero-spike
    imputation and multimodal variants can reuse them.
    """
    seq_len_bins = seq_len_bins or getattr(session, "seq_len", 0)
    if not seq_len_bins:
        raise ValueError("seq_len_bins required")
    arrays = {
        "spikes": session.spikes,
        "lfp": session.lfp,
        "behavior": session.behavior,
    }
    if getattr(session, "true_latents", None) is not None:
        arrays["latents"] = session.true_latents
    segs = segment(arrays, seq_len_bins)
    n_seq = segs["spikes"].shape[0]
    train_idx, test_idx = split_sequences(n_seq, train_frac, split_seed)

    stats = {}
    out = {}
    for name in ("lfp", "behavior"):
        train_flat = segs[name][train_idx].reshape(-1, segs[name].shape[-1])
        _, mean, std = zscore(train_flat)
        stats[name] = (mean, std)
        flat = segs[name].reshape(-1, segs[name].shape[-1])
        out[name] = apply_zscore(flat, mean, std).reshape(segs[name].shape)
    spk_train = segs["spikes"][train_idx].reshape(-1, segs["spikes"].shape[-1])
    stats["spikes"] = (
        spk_train.mean(axis=0).astype(np.float64),
        np.maximum(spk_train.std(axis=0), 1e-8).astype(np.float64),
    )

    return SessionRecord(
        session_id=getattr(session, "session_id", "s?"),
        spikes=segs["spikes"],
        lfp=out["lfp"],
        behavior=out["behavior"],
        train_idx=train_idx,
        test_idx=test_idx,
        stats=stats,
        true_latents=segs.get("latents"),
    )
