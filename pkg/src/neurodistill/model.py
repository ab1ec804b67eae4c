"""Rotary transformer encoder + MAE predictor over patched neural tokens.

Pre-norm blocks with GELU MLPs (4x expansion); rotary phases come from the
token's time index, so all patches at one timestep share a phase and
attention logits depend only on time differences. Masked pretraining drops
an exact fraction of tokens per sequence; the encoder sees the survivors,
the predictor re-attends over encoder outputs plus learnable mask tokens
(carrying the dropped positions' space embeddings and time identity), and
per-modality linear heads reconstruct patch values after a shared
down-projection. Spike heads emit log-rates scored by Poisson NLL, dense
heads emit values scored by MSE; padded dims never contribute to a loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .tokenizer import patchify


@dataclass
class EncoderConfig:
    depth: int = 4
    d: int = 64
    heads: int = 0  # 0 = derive as max(1, d // 32)
    predictor_depth: int = 4
    predictor_d: int = 48
    predictor_heads: int = 0
    down_proj_d: int = 16
    mask_prob: float = 0.6
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    max_tokens: int = 4096

    def validate(self, patch_sizes=None):
        if self.heads == 0:
            self.heads = max(1, self.d // 32)
        if self.predictor_heads == 0:
            self.predictor_heads = max(1, self.predictor_d // 32)
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.predictor_d % self.predictor_heads:
            raise ValueError("predictor_d not divisible by predictor_heads")
        if not (0.0 < self.mask_prob < 1.0):
            raise ValueError("mask_prob must lie strictly inside (0, 1)")
        if patch_sizes:
            s = patch_sizes.get("spikes")
            # the spike value table needs d/S-dimensional entries; dense
            # modalities embed through a matmul and carry no such constraint
            if s and self.d % s:
                raise ValueError(f"spike patch size {s} must divide d={self.d}")
        return self


@dataclass
class MaskPlan:
    kept_idx: np.ndarray  # [B, n_keep] sorted token indices
    drop_idx: np.ndarray  # [B, n_drop] sorted token indices
    n_tokens: int

    @property
    def n_dropped(self):
        return self.drop_idx.shape[1]

    def dropped_positions(self, n_patches):
        """(t, patch) pairs per sequence, for inspection."""
        return np.stack([self.drop_idx // n_patches, self.drop_idx % n_patches], axis=-1)


@dataclass
class Representation:
    tokens: nk.Tensor  # [B, N, d]
    pooled: nk.Tensor  # [B, T, d], mean over patches at each timestep
    time_idx: np.ndarray
    session_id: str
    modality: str


def make_mask_plan(n_tokens, batch_size, mask_prob, rng):
    """Drop exactly round(p * N) tokens per sequence, without replacement."""
    if not (0.0 < mask_prob < 1.0):
        raise ValueError("mask_prob must lie strictly inside (0, 1)")
    m = int(round(mask_prob * n_tokens))
    kept = np.empty((batch_size, n_tokens - m), dtype=np.int64)
    drop = np.empty((batch_size, m), dtype=np.int64)
    for b in range(batch_size):
        perm = rng.permutation(n_tokens)
        drop[b] = np.sort(perm[:m])
        kept[b] = np.sort(perm[m:])
    return MaskPlan(kept_idx=kept, drop_idx=drop, n_tokens=n_tokens)


def rope_tables(times, head_dim, base=10000.0):
    """cos/sin lookup for rotary phases; times [B, N] or [N].

    Returns arrays shaped [B or 1, 1, N, head_dim/2] ready to broadcast
    against [B, H, N, head_dim/2] query/key halves.
    """
    times = np.atleast_2d(np.asarray(times, dtype=np.float64))
    half = head_dim // 2
    theta = base ** (-2.0 * np.arange(half) / head_dim)
    ang = times[:, None, :, None] * theta  # [B, 1, N, half]
    dt = nk.default_dtype()
    return np.cos(ang).astype(dt), np.sin(ang).astype(dt)


def apply_rotary(x, cos, sin):
    """Rotate half-split feature pairs of x [B, H, N, hd] by the tables."""
    hd = x.shape[-1]
    x1 = nk.narrow(x, 3, 0, hd // 2)
    x2 = nk.narrow(x, 3, hd // 2, hd // 2)
    return nk.concat(
        [nk.sub(nk.mul(x1, cos), nk.mul(x2, sin)), nk.add(nk.mul(x1, sin), nk.mul(x2, cos))],
        axis=3,
    )


def _init_linear(params, name, fan_in, fan_out, rng, std=0.02):
    params[f"{name}/w"] = nk.parameter(rng.normal(0.0, std, (fan_in, fan_out)), f"{name}/w")
    params[f"{name}/b"] = nk.parameter(np.zeros(fan_out), f"{name}/b")


def _init_block(params, prefix, d, mlp_ratio, rng):
    for ln in ("ln1", "ln2"):
        params[f"{prefix}/{ln}/g"] = nk.parameter(np.ones(d), f"{prefix}/{ln}/g")
        params[f"{prefix}/{ln}/b"] = nk.parameter(np.zeros(d), f"{prefix}/{ln}/b")
    for lin in ("wq", "wk", "wv", "wo"):
        _init_linear(params, f"{prefix}/attn/{lin}", d, d, rng)
    _init_linear(params, f"{prefix}/mlp/fc1", d, mlp_ratio * d, rng)
    _init_linear(params, f"{prefix}/mlp/fc2", mlp_ratio * d, d, rng)


def _block_forward(params, prefix, x, cos, sin, heads):
    b, n, d = x.shape
    hd = d // heads
    h = nk.layer_norm(x, params[f"{prefix}/ln1/g"], params[f"{prefix}/ln1/b"])

    def split(t):
        return nk.transpose(nk.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    q = split(nk.linear(h, params[f"{prefix}/attn/wq/w"], params[f"{prefix}/attn/wq/b"]))
    k = split(nk.linear(h, params[f"{prefix}/attn/wk/w"], params[f"{prefix}/attn/wk/b"]))
    v = split(nk.linear(h, params[f"{prefix}/attn/wv/w"], params[f"{prefix}/attn/wv/b"]))
    q = apply_rotary(q, cos, sin)
    k = apply_rotary(k, cos, sin)
    q = nk.scale(q, 1.0 / np.sqrt(hd))
    att = nk.softmax(nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))))
    ctx = nk.matmul(att, v)  # [B, H, N, hd]
    ctx = nk.reshape(nk.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    x = nk.add(x, nk.linear(ctx, params[f"{prefix}/attn/wo/w"], params[f"{prefix}/attn/wo/b"]))

    h2 = nk.layer_norm(x, params[f"{prefix}/ln2/g"], params[f"{prefix}/ln2/b"])
    m = nk.gelu(nk.linear(h2, params[f"{prefix}/mlp/fc1/w"], params[f"{prefix}/mlp/fc1/b"]))
    m = nk.linear(m, params[f"{prefix}/mlp/fc2/w"], params[f"{prefix}/mlp/fc2/b"])
    return nk.add(x, m)


def _stack_forward(params, prefix, depth, x, times, heads, base):
    hd = x.shape[-1] // heads
    cos, sin = rope_tables(times, hd, base)
    for i in range(depth):
        x = _block_forward(params, f"{prefix}{i}", x, cos, sin, heads)
    return nk.layer_norm(x, params[f"{prefix}_ln/g"], params[f"{prefix}_ln/b"])


class Model:
    """Encoder + predictor + heads over a Tokenizer's sessions."""

    def __init__(self, cfg, tokenizer, seed=0):
        self.cfg = cfg.validate(tokenizer.patch_sizes)
        self.tokenizer = tokenizer
        self.params = {}
        self.mm_split = {}  # session_id -> n_spike_dims for zero-spike mode
        rng = np.random.default_rng(np.random.SeedSequence([seed, 29]))

        for i in range(cfg.depth):
            _init_block(self.params, f"enc{i}", cfg.d, cfg.mlp_ratio, rng)
        self.params["enc_ln/g"] = nk.parameter(np.ones(cfg.d), "enc_ln/g")
        self.params["enc_ln/b"] = nk.parameter(np.zeros(cfg.d), "enc_ln/b")

        _init_linear(self.params, "enc2pred", cfg.d, cfg.predictor_d, rng)
        self.params["mask_token"] = nk.parameter(rng.normal(0.0, 0.02, cfg.d), "mask_token")
        for i in range(cfg.predictor_depth):
            _init_block(self.params, f"pred{i}", cfg.predictor_d, cfg.mlp_ratio, rng)
        self.params["pred_ln/g"] = nk.parameter(np.ones(cfg.predictor_d), "pred_ln/g")
        self.params["pred_ln/b"] = nk.parameter(np.zeros(cfg.predictor_d), "pred_ln/b")

        _init_linear(self.params, "down", cfg.predictor_d, cfg.down_proj_d, rng)
        # sorted so init does not depend on patch_sizes insertion order
        for mod in sorted(tokenizer.patch_sizes):
            _init_linear(self.params, f"head/{mod}", cfg.down_proj_d,
                         tokenizer.patch_sizes[mod], rng)
        self._head_rng = rng

    @property
    def parameters(self):
        """Every trainable tensor, tokenizer tables and spaces included."""
        merged = dict(self.tokenizer.params)
        merged.update(self.params)
        return merged

    def register_session(self, session_id, n_signals, modality, rng, n_spike_dims=None):
        emb = self.tokenizer.register_session(session_id, n_signals, modality, rng)
        if modality == "mm":
            if n_spike_dims is None:
                raise ValueError("mm registration needs n_spike_dims for zero-spike mode")
            self.mm_split[session_id] = int(n_spike_dims)
        return emb

    def _check_len(self, n_tokens):
        if n_tokens > self.cfg.max_tokens:
            raise ValueError(f"{n_tokens} tokens exceeds configured max {self.cfg.max_tokens}")

    def encode(self, x, session_id, modality):
        """Full-token forward; returns per-token and per-timestep latents."""
        batch = self.tokenizer.tokenize(x, session_id, modality)
        self._check_len(batch.n_tokens)
        out = _stack_forward(
            self.params, "enc", self.cfg.depth, batch.embeddings, batch.time_idx,
            self.cfg.heads, self.cfg.rope_base,
        )
        b = out.shape[0]
        p = batch.layout.n_patches
        pooled = nk.reduce_mean(nk.reshape(out, (b, batch.seq_len, p, self.cfg.d)), axis=2)
        return Representation(out, pooled, batch.time_idx, session_id, modality)

    def make_plan(self, x_or_tokens, session_id, modality, rng):
        t, n = x_or_tokens.shape[1], x_or_tokens.shape[2]
        lo = self.tokenizer.session_layout(session_id, modality)
        return make_mask_plan(t * lo.n_patches, x_or_tokens.shape[0], self.cfg.mask_prob, rng)

    def mae_forward(self, x, session_id, modality, plan=None, rng=None):
        """Masked reconstruction loss; returns (loss, details dict)."""
        if plan is None:
            if rng is None:
                raise ValueError("mae_forward needs a plan or an rng")
            plan = self.make_plan(x, session_id, modality, rng)
        if plan.n_dropped == 0:
            raise ValueError("mask plan drops no tokens; nothing to reconstruct")
        batch = self.tokenizer.tokenize(x, session_id, modality)
        self._check_len(batch.n_tokens)
        cfg = self.cfg

        kept = nk.gather_rows(batch.embeddings, plan.kept_idx)
        times_kept = batch.time_idx[plan.kept_idx]
        enc_out = _stack_forward(
            self.params, "enc", cfg.depth, kept, times_kept, cfg.heads, cfg.rope_base
        )

        emb, lo = self.tokenizer.sessions[(session_id, modality)]
        drop_patch = batch.patch_idx[plan.drop_idx]  # [B, m]
        space_drop = nk.embedding(emb.vectors, drop_patch)
        mask_in = nk.add(space_drop, self.params["mask_token"])
        pred_in = nk.linear(
            nk.concat([enc_out, mask_in], axis=1),
            self.params["enc2pred/w"],
            self.params["enc2pred/b"],
        )
        times_all = np.concatenate([times_kept, batch.time_idx[plan.drop_idx]], axis=1)
        pred_out = _stack_forward(
            self.params, "pred", cfg.predictor_depth, pred_in, times_all,
            cfg.predictor_heads, cfg.rope_base,
        )
        masked_out = nk.narrow(pred_out, 1, plan.kept_idx.shape[1], plan.n_dropped)
        down = nk.linear(masked_out, self.params["down/w"], self.params["down/b"])
        recon = nk.linear(down, self.params[f"head/{modality}/w"], self.params[f"head/{modality}/b"])

        pad_val = 0
        values = patchify(np.asarray(x), lo, pad_value=pad_val)  # [B,T,P,S]
        values = values.reshape(values.shape[0], -1, lo.patch_size)
        targets = np.take_along_axis(values, plan.drop_idx[..., None], axis=1)
        loss_mask = batch.dim_mask[drop_patch].astype(nk.default_dtype())

        if modality == "spikes":
            loss = nk.poisson_nll(recon, targets.astype(np.float64), loss_mask)
        else:
            loss = nk.mse(recon, targets, loss_mask)
        return loss, {"recon": recon, "targets": targets, "plan": plan, "mask": loss_mask}

    def _ensure_behavior_head(self, session_id, n_out):
        name = f"behavior/{session_id}"
        if f"{name}/w" not in self.params:
            _init_linear(self.params, name, self.cfg.d, n_out, self._head_rng)
        return name

    def behavior_predict(self, rep, session_id, n_out=2):
        """Linear map from pooled per-timestep latents to behavior dims."""
        name = self._ensure_behavior_head(session_id, n_out)
        return nk.linear(rep.pooled, self.params[f"{name}/w"], self.params[f"{name}/b"])

    def behavior_loss(self, rep, targets, session_id):
        preds = self.behavior_predict(rep, session_id, n_out=targets.shape[-1])
        return nk.mse(preds, targets)

    def zero_spike_forward(self, x, session_id):
        """SS-MM inference with spike dims zeroed (post z-score mean)."""
        if "mm" not in self.tokenizer.patch_sizes or session_id not in self.mm_split:
            raise ValueError("zero-spike inference requires a multimodal session")
        n_spk = self.mm_split[session_id]
        x = np.array(x, copy=True)
        x[..., :n_spk] = 0.0
        return self.encode(x, session_id, "mm")
