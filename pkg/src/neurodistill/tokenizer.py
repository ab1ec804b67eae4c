"""Spatial patching and token embedding for spike, LFP and multimodal inputs.

Channels are grouped into patches of S signals (zero-padded when S does not
divide the channel count), so a [B, T, n] array becomes T * ceil(n/S)
tokens per sequence, ordered time-major: token index t * n_patches + j is
(time t, patch j). Spike patches embed each count through a shared value
table (V_k in R^{d/S}, concatenated across the patch); LFP patches go
through a shared linear layer or a dilated causal conv stack. Every token
then adds its session-specific space embedding, which is the only
session-owned parameter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import numkit as nk


@dataclass(frozen=True)
class PatchLayout:
    n_signals: int
    patch_size: int

    @property
    def n_patches(self):
        return -(-self.n_signals // self.patch_size)

    @property
    def pad(self):
        return self.n_patches * self.patch_size - self.n_signals


def layout(n_signals, patch_size):
    if n_signals <= 0 or patch_size <= 0:
        raise ValueError("n_signals and patch_size must be positive")
    lo = PatchLayout(n_signals, patch_size)
    assert 0 <= lo.pad < patch_size and lo.n_patches >= 1
    return lo


def patchify(x, lo, pad_value=0.0):
    """[B, T, n] -> [B, T, P, S] with the tail of the last patch padded."""
    b, t, n = x.shape
    if n != lo.n_signals:
        raise ValueError(f"expected {lo.n_signals} signals, got {n}")
    if lo.pad:
        pad_block = np.full((b, t, lo.pad), pad_value, dtype=x.dtype)
        x = np.concatenate([x, pad_block], axis=2)
    return x.reshape(b, t, lo.n_patches, lo.patch_size)


def dim_mask(lo):
    """[P, S] bool, True where the dim is a real signal (False = padding)."""
    mask = np.ones((lo.n_patches, lo.patch_size), dtype=bool)
    if lo.pad:
        mask[-1, lo.patch_size - lo.pad :] = False
    return mask


@dataclass
class SessionEmbedding:
    session_id: str
    modality: str
    param_name: str
    vectors: nk.Tensor  # [n_patches, d]

    @property
    def n_patches(self):
        return self.vectors.shape[0]


@dataclass
class TokenBatch:
    embeddings: nk.Tensor  # [B, T*P, d]
    time_idx: np.ndarray  # [T*P]
    patch_idx: np.ndarray  # [T*P]
    session_id: str
    modality: str
    layout: PatchLayout
    dim_mask: np.ndarray  # [P, S]
    seq_len: int

    @property
    def n_tokens(self):
        return self.embeddings.shape[1]


class Tokenizer:
    """Owns the shared value-embedding parameters and per-session spaces.

    patch_sizes maps modality name to S; every S must divide d so the
    spike value table (d/S per count) concatenates back to d.
    """

    def __init__(
        self,
        d=64,
        patch_sizes=None,
        k_max=5,
        lfp_embed="linear",
        conv_kernel=3,
        conv_dilations=(1, 2, 4),
        conv_hidden=None,
        init_seed=0,
    ):
        self.d = d
        self.patch_sizes = dict(patch_sizes or {"spikes": 16, "lfp": 8})
        self.k_max = k_max
        if lfp_embed not in ("linear", "dconv"):
            raise ValueError(f"unknown lfp_embed {lfp_embed!r}")
        self.lfp_embed = lfp_embed
        self.conv_kernel = conv_kernel
        self.conv_dilations = tuple(conv_dilations)
        self.conv_hidden = conv_hidden or d
        self.params = {}
        self.sessions = {}
        self._clamp_warned = set()

        rng = np.random.default_rng(np.random.SeedSequence([init_seed, 17]))
        s_spk = self.patch_sizes.get("spikes")
        if s_spk:
            if d % s_spk:
                raise ValueError(f"patch size {s_spk} must divide d={d}")
            self.params["spike_table"] = nk.parameter(
                rng.normal(0.0, 0.02, size=(k_max + 1, d // s_spk)), "spike_table"
            )
        for mod in sorted(self.patch_sizes):
            if mod == "spikes":
                continue
            self._init_value_params(mod, self.patch_sizes[mod], rng)

    def _init_value_params(self, mod, s, rng):
        if mod == "lfp" and self.lfp_embed == "dconv":
            c_in = s
            for i, _ in enumerate(self.conv_dilations):
                c_out = self.d if i == len(self.conv_dilations) - 1 else self.conv_hidden
                w = rng.normal(0.0, 1.0 / np.sqrt(c_in * self.conv_kernel), (self.conv_kernel, c_in, c_out))
                self.params[f"{mod}_conv{i}/w"] = nk.parameter(w, f"{mod}_conv{i}/w")
                self.params[f"{mod}_conv{i}/b"] = nk.parameter(np.zeros(c_out), f"{mod}_conv{i}/b")
                c_in = c_out
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(s), size=(s, self.d))
            self.params[f"{mod}_value/w"] = nk.parameter(w, f"{mod}_value/w")
            self.params[f"{mod}_value/b"] = nk.parameter(np.zeros(self.d), f"{mod}_value/b")

    def register_session(self, session_id, n_signals, modality, rng):
        """Fresh trainable space embeddings for one (session, modality)."""
        key = (session_id, modality)
        if key in self.sessions:
            raise ValueError(f"session {session_id!r} already registered for {modality!r}")
        if modality not in self.patch_sizes:
            raise ValueError(f"no patch size configured for modality {modality!r}")
        lo = layout(n_signals, self.patch_sizes[modality])
        name = f"space/{modality}/{session_id}"
        vectors = nk.parameter(rng.normal(0.0, 0.02, size=(lo.n_patches, self.d)), name)
        self.params[name] = vectors
        emb = SessionEmbedding(session_id, modality, name, vectors)
        self.sessions[key] = (emb, lo)
        return emb

    def session_layout(self, session_id, modality):
        return self.sessions[(session_id, modality)][1]

    def tokenize(self, x, session_id, modality):
        """[B, T, n] raw values -> TokenBatch for a registered session."""
        if x.ndim != 3:
            raise ValueError("expected [B, T, n] input")
        emb, lo = self.sessions[(session_id, modality)]
        if modality == "spikes":
            value = self._spike_values(x, lo, session_id)
        else:
            value = self._dense_values(x, lo, modality)
        tokens = nk.add(value, emb.vectors)  # [B, T, P, d] + [P, d]
        b, t = x.shape[0], x.shape[1]
        tokens = nk.reshape(tokens, (b, t * lo.n_patches, self.d))
        return TokenBatch(
            embeddings=tokens,
            time_idx=np.repeat(np.arange(t), lo.n_patches),
            patch_idx=np.tile(np.arange(lo.n_patches), t),
            session_id=session_id,
            modality=modality,
            layout=lo,
            dim_mask=dim_mask(lo),
            seq_len=t,
        )

    def _spike_values(self, counts, lo, session_id):
        counts = np.asarray(counts)
        if counts.min(initial=0) < 0:
            raise ValueError("negative spike counts")
        if counts.max(initial=0) > self.k_max:
            if session_id not in self._clamp_warned:
                self._clamp_warned.add(session_id)
                warnings.warn(
                    f"session {session_id}: spike counts above {self.k_max} clamped",
                    RuntimeWarning,
                    stacklevel=3,
                )
            counts = np.minimum(counts, self.k_max)
        patches = patchify(counts.astype(np.int64), lo, pad_value=0)  # [B,T,P,S]
        looked = nk.embedding(self.params["spike_table"], patches)  # [B,T,P,S,d/S]
        b, t = patches.shape[0], patches.shape[1]
        return nk.reshape(looked, (b, t, lo.n_patches, self.d))

    def _dense_values(self, x, lo, modality):
        patches = patchify(np.asarray(x, dtype=nk.default_dtype()), lo, pad_value=0.0)
        b, t = patches.shape[0], patches.shape[1]
        if modality == "lfp" and self.lfp_embed == "dconv":
            # shared conv over each patch's time series: fold patches into
            # the batch axis so time stays the conv axis
            h = nk.transpose(nk.tensor(patches), (0, 2, 1, 3))  # [B,P,T,S]
            h = nk.reshape(h, (b * lo.n_patches, t, lo.patch_size))
            for i, dil in enumerate(self.conv_dilations):
                h = nk.causal_conv1d(
                    h,
                    self.params[f"{modality}_conv{i}/w"],
                    self.params[f"{modality}_conv{i}/b"],
                    dilation=dil,
                )
                if i < len(self.conv_dilations) - 1:
                    h = nk.gelu(h)
            h = nk.reshape(h, (b, lo.n_patches, t, self.d))
            return nk.transpose(h, (0, 2, 1, 3))
        return nk.linear(
            nk.tensor(patches),
            self.params[f"{modality}_value/w"],
            self.params[f"{modality}_value/b"],
        )
