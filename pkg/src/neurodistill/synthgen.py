"""Synthetic paired spike/LFP/behavior sessions from a shared latent LDS.

All sessions in a dataset share one latent linear dynamical system and one
behavior readout subspace; per-session observation models (spike loadings,
LFP mixing, channel counts) differ, mimicking recordings where the probe
moves but the underlying computation does not.

The generator is built so the cross-modal premise holds by construction:
spike counts are Poisson observations of every latent dimension, with noise
that averages away across neurons. The LFP sees the latent space split into
two orthogonal groups (a per-session random split): one group leaks into
the channels linearly, the other is expressed only as amplitude modulation
of narrowband carriers that dominate channel variance. A linear readout of
LFP therefore tops out at the leak group, while the modulated group is
reachable only by demodulating the carriers, which reconstruction-trained
models have little pressure to do. Correlated low-frequency noise that no
channel averaging removes and a fraction of redundant (scaled-copy)
channels round out the LFP. Least squares from spikes to behavior beats
least squares from LFP by a wide margin, and the true latents give an
oracle ceiling for every downstream metric.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

LOG_RATE_CLAMP = 5.0  # rates above e^5 per bin are a bug, not a sample
SPIKE_COUNT_CLAMP = 5  # matches the value-embedding table size downstream
AR_COEFF = 0.9  # one-pole low-pass for the LFP noise (~1.7 Hz at 100 Hz bins)
RHYTHM_RADIUS = 0.85  # carrier pole radius: narrow enough that carriers at
# different frequencies stay spectrally separate, wide enough that the
# carrier's own amplitude wander is fast against the latent-driven envelope
RHYTHM_BURN_IN = 200  # bins discarded while the carriers reach steady state
ENVELOPE_SMOOTH = 0.9  # one-pole low-pass on the envelope drive, so the
# modulation sits well below the carriers' own amplitude-wander timescale


@dataclass
class GenConfig:
    n_sessions: int
    latent_dim: int = 8
    seq_len: int = 100  # bins per sequence, 10 ms each
    seqs_per_session: int = 120
    n_neurons_range: tuple = (30, 80)
    n_lfp_range: tuple = (16, 32)
    n_behavior: int = 2
    spectral_radius: float = 0.97
    lfp_noise_corr: float = 0.6
    lfp_redundancy: float = 0.5
    seed: int = 0
    # free noise knobs (defaults tuned so the spike>lfp decode asymmetry
    # holds with a comfortable margin; see tests)
    spike_loading_std: float = 0.4
    lfp_noise_level: float = 1.0  # std of the low-pass noise per channel
    lfp_white_noise: float = 0.5
    copy_noise: float = 0.3
    behavior_noise: float = 0.22  # SNR ~ 20 against unit signal variance
    # LFP rhythm knobs: most channel variance is narrowband carriers whose
    # amplitude the latents modulate. rhythm_latent_dim of the latent
    # dimensions reach the LFP only through that modulation; the rest leak
    # linearly with gain lfp_linear_gain.
    lfp_linear_gain: float = 1.5
    n_rhythms: int = 5
    rhythm_latent_dim: int = 5
    rhythm_gain: float = 3.0
    rhythm_mod: float = 0.9  # envelope modulation depth per unit latent
    rhythm_freq_range: tuple = (0.3, 2.7)  # carrier angles, radians per bin

    def validate(self):
        if not (0.0 < self.spectral_radius < 1.0):
            raise ValueError(f"spectral_radius must be in (0,1), got {self.spectral_radius}")
        if not (0.0 <= self.lfp_redundancy < 1.0):
            raise ValueError(f"lfp_redundancy must be in [0,1), got {self.lfp_redundancy}")
        if self.n_rhythms < 0:
            raise ValueError(f"n_rhythms must be >= 0, got {self.n_rhythms}")
        if not (0 <= self.rhythm_latent_dim <= self.latent_dim):
            raise ValueError(
                f"rhythm_latent_dim must be in [0, latent_dim], got {self.rhythm_latent_dim}"
            )
        if self.rhythm_latent_dim and not self.n_rhythms:
            raise ValueError("rhythm_latent_dim > 0 needs n_rhythms > 0, else those latents never reach the LFP")
        for name in ("lfp_linear_gain", "rhythm_gain", "rhythm_mod"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        lo, hi = self.rhythm_freq_range
        if not (0.0 < lo <= hi < np.pi):
            raise ValueError(f"rhythm_freq_range must satisfy 0 < lo <= hi < pi, got ({lo}, {hi})")
        for name in ("n_sessions", "latent_dim", "seq_len", "seqs_per_session", "n_behavior"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_neurons_range", "n_lfp_range"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"bad {name}: ({lo}, {hi})")
        return self

    @property
    def total_bins(self):
        return self.seq_len * self.seqs_per_session


@dataclass
class SessionParams:
    """Per-session observation model; regenerated, never stored in files."""

    n_neurons: int
    n_lfp: int
    spike_loading: np.ndarray  # [n_neurons, latent_dim]
    spike_baseline: np.ndarray  # [n_neurons]
    leak_basis: np.ndarray  # [latent_dim, latent_dim - rhythm_latent_dim]
    rhythm_basis: np.ndarray  # [latent_dim, rhythm_latent_dim]; orthogonal to leak_basis
    lfp_mixing: np.ndarray  # [n_base, latent_dim - rhythm_latent_dim]
    copy_src: np.ndarray  # [n_copy] indices into base channels
    copy_scale: np.ndarray  # [n_copy]
    behavior_proj: np.ndarray  # [n_behavior, latent_dim]
    rhythm_freqs: np.ndarray  # [n_rhythms] carrier angles, radians per bin
    rhythm_mix: np.ndarray  # [n_base, n_rhythms] carrier-to-channel weights
    rhythm_readout: np.ndarray  # [n_rhythms, rhythm_latent_dim] envelope drivers

    @property
    def n_base(self):
        return self.lfp_mixing.shape[0]


@dataclass
class SyntheticSession:
    session_id: str
    spikes: np.ndarray  # uint8 counts [T_total, n_neurons]
    lfp: np.ndarray  # float32 [T_total, n_lfp]
    behavior: np.ndarray  # float32 [T_total, n_behavior]
    true_latents: np.ndarray  # float32 [T_total, latent_dim]; oracle-only
    seq_len: int = 0

    def __post_init__(self):
        t = self.spikes.shape[0]
        for arr in (self.lfp, self.behavior, self.true_latents):
            if arr.shape[0] != t:
                raise ValueError("session arrays disagree on total bin count")
        if self.spikes.min(initial=0) < 0:
            raise ValueError("negative spike counts")


def make_dynamics(latent_dim, spectral_radius, rng):
    """Random rotation-rich transition matrix with the given spectral radius.

    A = rho * Q R Q^T where R is block-diagonal 2x2 rotations and Q a random
    orthogonal basis; Q R Q^T is orthogonal, so every eigenvalue of A has
    modulus exactly rho.
    """
    d = latent_dim
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))  # fix signs so Q is Haar-ish, det-stable
    blocks = np.zeros((d, d))
    i = 0
    while i + 1 < d:
        theta = rng.uniform(0.05, 0.35)  # periods of roughly 18 to 125 bins
        c, s = np.cos(theta), np.sin(theta)
        blocks[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
        i += 2
    if i < d:
        blocks[i, i] = 1.0
    return spectral_radius * (q @ blocks @ q.T)


def simulate_latent(cfg, rng, A=None, n_steps=None, noise_std=None, x0=None):
    """Run the LDS forward; returns (latents [n_steps, d], A).

    noise_std defaults to sqrt(1 - rho^2), which makes the stationary
    covariance exactly the identity (check: P = A P A^T + s^2 I is solved
    by P = I when A is rho times an orthogonal matrix). x0 defaults to a
    draw from that stationary distribution, so there is no burn-in.
    """
    cfg.validate()
    d = cfg.latent_dim
    if A is None:
        A = make_dynamics(d, cfg.spectral_radius, rng)
    if n_steps is None:
        n_steps = cfg.total_bins
    if noise_std is None:
        noise_std = float(np.sqrt(1.0 - cfg.spectral_radius**2))
    x = np.empty((n_steps, d))
    x[0] = rng.standard_normal(d) if x0 is None else x0
    w = rng.standard_normal((n_steps - 1, d)) * noise_std
    for t in range(1, n_steps):
        x[t] = A @ x[t - 1] + w[t - 1]
    return x, A


def render_spikes(latents, params, rng, k_max=SPIKE_COUNT_CLAMP):
    """Poisson counts with log-rate eta = C x + b, clamped to k_max.

    Baselines are set at param creation so the mean rate per neuron is an
    exact target in [0.1, 0.5] counts/bin. Log-rates above LOG_RATE_CLAMP
    are clamped with a warning; they indicate a mis-scaled loading.
    """
    eta = latents @ params.spike_loading.T + params.spike_baseline
    if np.any(eta > LOG_RATE_CLAMP):
        warnings.warn(
            f"clamping {int((eta > LOG_RATE_CLAMP).sum())} log-rates above {LOG_RATE_CLAMP}",
            RuntimeWarning,
            stacklevel=2,
        )
        eta = np.minimum(eta, LOG_RATE_CLAMP)
    counts = rng.poisson(np.exp(eta))
    out_dtype = np.uint8 if k_max <= 255 else np.int32
    return np.minimum(counts, k_max).astype(out_dtype)


def _ar2_carriers(rng, T, freqs, n_lanes, radius=RHYTHM_RADIUS, burn=RHYTHM_BURN_IN):
    """Unit-variance resonant AR(2) streams, n_lanes per frequency.

    Poles at radius * exp(+-i * freq): phi1 = 2 r cos w, phi2 = -r^2. The
    innovation variance solves the stationary-variance identity
    gamma0 = s^2 (1 - phi2) / ((1 + phi2)((1 - phi2)^2 - phi1^2))
    for gamma0 = 1; a burn-in washes out the zero start. Lanes at the same
    frequency are independent draws (independent phase), shape [T, k, n_lanes].
    """
    k = len(freqs)
    if k == 0:
        return np.zeros((T, 0, n_lanes))
    phi1 = 2.0 * radius * np.cos(np.asarray(freqs))[:, None]
    phi2 = -radius * radius
    s2 = (1.0 + phi2) * ((1.0 - phi2) ** 2 - phi1**2) / (1.0 - phi2)
    eps = rng.standard_normal((T + burn, k, n_lanes)) * np.sqrt(s2)
    out = np.zeros((T + burn, k, n_lanes))
    for t in range(2, T + burn):
        out[t] = phi1 * out[t - 1] + phi2 * out[t - 2] + eps[t]
    return out[burn:]


def render_lfp(latents, params, cfg, rng, zscore=True):
    """Mix latents into channels and add the structured noise.

    Channel layout is [base channels, redundant copies]. Each base channel
    carries its own independent realization of every narrowband rhythm; the
    instantaneous amplitude of a rhythm is shared across channels and one
    group of latent dimensions modulates it (1 + rhythm_mod * low-passed
    readout), so channel phase is uninformative while pooled channel power
    tracks the latents. Each channel also gets a direct linear leak of the
    complementary latent group. On top of that,
    every channel gets low-pass AR(1) noise built from one common source
    plus a private source, weighted so the pairwise correlation of the
    low-pass noise equals cfg.lfp_noise_corr, then white measurement noise.
    Copies are scaled base channels (everything but their white noise) plus
    their own white noise, so they add almost no new information.
    """
    T = latents.shape[0]
    n_base = params.n_base
    n_copy = params.copy_src.size
    signal = cfg.lfp_linear_gain * ((latents @ params.leak_basis) @ params.lfp_mixing.T)

    carriers = _ar2_carriers(rng, T, params.rhythm_freqs, n_base)
    if carriers.shape[1]:
        drive = _ema((latents @ params.rhythm_basis) @ params.rhythm_readout.T)
        envelope = 1.0 + cfg.rhythm_mod * drive  # [T, k], shared across channels
        # each channel rides its own carrier realization: phase carries no
        # information across channels, the shared envelope does
        modulated = carriers * envelope[:, :, None]  # [T, k, n_base]
        signal = signal + cfg.rhythm_gain * (modulated * params.rhythm_mix.T[None]).sum(axis=1)

    c = cfg.lfp_noise_corr
    lp = _ar1_noise(rng, T, n_base + 1)  # column 0 is the common source
    shared = np.sqrt(c) * lp[:, :1] + np.sqrt(1.0 - c) * lp[:, 1:]
    base = signal + cfg.lfp_noise_level * shared
    base = base + cfg.lfp_white_noise * rng.standard_normal((T, n_base))

    if n_copy:
        copies = base[:, params.copy_src] * params.copy_scale
        copies = copies + cfg.copy_noise * rng.standard_normal((T, n_copy))
        y = np.concatenate([base, copies], axis=1)
    else:
        y = base
    if zscore:
        y = (y - y.mean(axis=0)) / y.std(axis=0)
    return y.astype(np.float32)


def _ema(x, a=ENVELOPE_SMOOTH):
    """Causal one-pole low-pass with unit DC gain, column-wise."""
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, len(x)):
        out[t] = a * out[t - 1] + (1.0 - a) * x[t]
    return out


def _ar1_noise(rng, T, n, a=AR_COEFF):
    """n independent AR(1) streams with unit stationary variance."""
    eps = rng.standard_normal((T, n)) * np.sqrt(1.0 - a * a)
    out = np.empty((T, n))
    out[0] = rng.standard_normal(n)
    for t in range(1, T):
        out[t] = a * out[t - 1] + eps[t]
    return out


def render_behavior(latents, params, cfg, rng, zscore=True):
    """Linear readout of the shared behavior subspace plus small noise."""
    z = latents @ params.behavior_proj.T
    z = z + cfg.behavior_noise * rng.standard_normal(z.shape)
    if zscore:
        z = (z - z.mean(axis=0)) / z.std(axis=0)
    return z.astype(np.float32)


def make_session_params(cfg, base_proj, rng):
    """Draw one session's observation model.

    base_proj is the dataset-shared behavior readout [n_behavior, d] with
    orthonormal rows; each session rotates it within the output plane, so
    the decoded subspace is shared while the axes are not.
    """
    d = cfg.latent_dim
    n_s = int(rng.integers(cfg.n_neurons_range[0], cfg.n_neurons_range[1] + 1))
    n_y = int(rng.integers(cfg.n_lfp_range[0], cfg.n_lfp_range[1] + 1))
    n_copy = int(round(cfg.lfp_redundancy * n_y))
    n_base = n_y - n_copy

    loading = rng.standard_normal((n_s, d)) * cfg.spike_loading_std
    rates = rng.uniform(0.1, 0.5, size=n_s)
    # E[exp(c.x)] = exp(|c|^2/2) for x ~ N(0, I); subtract it so the mean
    # rate is exactly the drawn target
    baseline = np.log(rates) - 0.5 * (loading**2).sum(axis=1)

    # random orthonormal split of the latent space: which dimensions the LFP
    # expresses as envelopes vs as a linear leak is a per-session accident
    d_r = cfg.rhythm_latent_dim
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))
    rhythm_basis, leak_basis = q[:, :d_r], q[:, d_r:]

    # unit-ish row power: latents are isotropic, so dividing by the sqrt of
    # the subspace size keeps per-channel signal variance near 1
    mixing = rng.standard_normal((n_base, d - d_r)) / np.sqrt(max(d - d_r, 1))
    copy_src = rng.integers(0, n_base, size=n_copy)
    copy_scale = rng.uniform(0.6, 1.4, size=n_copy)

    # stratified carrier frequencies: one per equal slice of the range plus
    # jitter, so carriers never collide spectrally and stay separable
    k = cfg.n_rhythms
    lo, hi = cfg.rhythm_freq_range
    slices = (np.arange(k) + rng.uniform(0.25, 0.75, size=k)) / max(k, 1)
    rhythm_freqs = lo + (hi - lo) * slices
    rhythm_mix = rng.standard_normal((n_base, k)) / np.sqrt(max(k, 1))
    # unit-norm readout rows: every rhythm gets an envelope drive of the
    # same strength, so no rhythm is accidentally unmodulated
    readout = rng.standard_normal((k, d_r))
    norms = np.linalg.norm(readout, axis=1, keepdims=True)
    rhythm_readout = readout / np.maximum(norms, 1e-12)

    if cfg.n_behavior == 2:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        cth, sth = np.cos(theta), np.sin(theta)
        rot = np.array([[cth, -sth], [sth, cth]])
    else:
        q, r = np.linalg.qr(rng.standard_normal((cfg.n_behavior, cfg.n_behavior)))
        rot = q * np.sign(np.diag(r))
    behavior_proj = rot @ base_proj

    return SessionParams(
        n_neurons=n_s,
        n_lfp=n_y,
        spike_loading=loading,
        spike_baseline=baseline,
        leak_basis=leak_basis,
        rhythm_basis=rhythm_basis,
        lfp_mixing=mixing,
        copy_src=copy_src,
        copy_scale=copy_scale,
        behavior_proj=behavior_proj,
        rhythm_freqs=rhythm_freqs,
        rhythm_mix=rhythm_mix,
        rhythm_readout=rhythm_readout,
    )


def _shared_rng(seed):
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def _session_rng(seed, session_idx):
    # stream depends only on (seed, session index): sessions can be
    # generated independently and in any order
    return np.random.default_rng(np.random.SeedSequence([seed, 1 + session_idx]))


def make_shared(cfg):
    """Dataset-level shared pieces: dynamics A and behavior readout base."""
    rng = _shared_rng(cfg.seed)
    A = make_dynamics(cfg.latent_dim, cfg.spectral_radius, rng)
    q, r = np.linalg.qr(rng.standard_normal((cfg.latent_dim, cfg.n_behavior)))
    base_proj = (q * np.sign(np.diag(r))).T  # orthonormal rows [n_b, d]
    return A, base_proj


def generate_session(cfg, session_idx, A, base_proj):
    rng = _session_rng(cfg.seed, session_idx)
    params = make_session_params(cfg, base_proj, rng)
    latents, _ = simulate_latent(cfg, rng, A=A)
    spikes = render_spikes(latents, params, rng)
    lfp = render_lfp(latents, params, cfg, rng)
    behavior = render_behavior(latents, params, cfg, rng)
    return (
        SyntheticSession(
            session_id=f"s{session_idx:03d}",
            spikes=spikes,
            lfp=lfp,
            behavior=behavior,
            true_latents=latents.astype(np.float32),
            seq_len=cfg.seq_len,
        ),
        params,
    )


def generate_dataset(cfg):
    """All sessions plus a manifest of their dimensions.

    Deterministic in cfg.seed down to the byte; the manifest mirrors the
    array shapes so container writers can trust it.
    """
    cfg.validate()
    A, base_proj = make_shared(cfg)
    sessions = []
    for i in range(cfg.n_sessions):
        session, _ = generate_session(cfg, i, A, base_proj)
        sessions.append(session)
    manifest = {
        "seed": cfg.seed,
        "latent_dim": cfg.latent_dim,
        "seq_len": cfg.seq_len,
        "sessions": [
            {
                "session_id": s.session_id,
                "n_bins": int(s.spikes.shape[0]),
                "n_neurons": int(s.spikes.shape[1]),
                "n_lfp": int(s.lfp.shape[1]),
                "n_behavior": int(s.behavior.shape[1]),
            }
            for s in sessions
        ],
    }
    return sessions, manifest
