"""Training loops: masked pretraining, supervised finetuning, distillation.

One engine (run_training) drives five objectives over per-session sequence
batches:

  mae          masked reconstruction of the input stream
  sup          masked reconstruction + behavior regression (unit weights)
  fullsup      behavior regression only
  distill      full unmasked input reconstruction through a per-session
               linear readout of the pooled latents, plus lambda times
               (1 - cosine) alignment to a frozen teacher's pooled latents
  distill_sup  behavior regression plus the same alignment term

Batches never mix sessions (signal counts differ); an epoch shuffles each
session's sequences, chunks them, then interleaves the chunks. Validation
is a fixed fraction of the train split, carved off by seed and never
touched by the optimizer. Per-epoch TSV logging records the learning rate,
weight decay, every loss term and the validation loss; the sum of logged
terms must reproduce the optimized total to 1e-6 or the run aborts. A
non-finite loss or gradient ends training immediately and the model is
rolled back to the best validation checkpoint seen.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import container
from . import numkit as nk
from .model import EncoderConfig, Model
from .tokenizer import Tokenizer

OBJECTIVES = {
    "mae": ("mae",),
    "sup": ("mae", "behavior"),
    "fullsup": ("behavior",),
    "distill": ("recon", "align"),
    "distill_sup": ("behavior", "align"),
}


@dataclass
class TrainConfig:
    objective: str = "mae"
    modality: str = "spikes"  # input stream: spikes | lfp | mm
    max_epochs: int = 150
    batch_size: int = 32
    patience: int = 25
    lambda_align: float = 5.0
    val_frac: float = 0.1
    seed: int = 0
    unfreeze_epoch: int | None = None
    schedule: nk.Schedule = field(default_factory=nk.Schedule)

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}; pick from {sorted(OBJECTIVES)}")
        if self.modality not in ("spikes", "lfp", "mm"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.max_epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("max_epochs, batch_size and patience must be >= 1")
        if not (0.0 < self.val_frac < 0.5):
            raise ValueError("val_frac must lie in (0, 0.5)")
        if self.lambda_align < 0:
            raise ValueError("lambda_align must be nonnegative")
        if self.objective == "distill" and self.lambda_align == 0:
            raise ValueError("distill with lambda_align=0 optimizes nothing cross-modal")
        return self

    @property
    def needs_teacher(self):
        if self.objective == "distill":
            return True
        return self.objective == "distill_sup" and self.lambda_align > 0


class TeacherHandle:
    """A trained spike model serving as the distillation target.

    Frozen by default: forwards run off-tape and return constant pooled
    latents. When a run unfreezes it, its tensors are renamed under a
    teacher/ prefix so their gradients and optimizer state cannot collide
    with the student's identically named parameters.
    """

    def __init__(self, model, modality="spikes"):
        self.model = model
        self.modality = modality
        self.frozen = True
        self._prefixed = False

    def params_hash(self):
        h = hashlib.sha256()
        for key in sorted(self.model.parameters):
            t = self.model.parameters[key]
            h.update(key.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def prefix_names(self):
        if self._prefixed:
            return
        for key, t in self.model.parameters.items():
            t.name = f"teacher/{key}"
        self._prefixed = True

    def encode_pooled(self, x, session_id):
        if self.frozen:
            with nk.no_grad():
                rep = self.model.encode(x, session_id, self.modality)
            return nk.tensor(rep.pooled.data)
        return self.model.encode(x, session_id, self.modality).pooled


@dataclass
class EarlyStopper:
    """Stop after `patience` consecutive epochs without improvement."""

    patience: int
    best: float = float("inf")
    bad_epochs: int = 0

    def update(self, val):
        if val < self.best:
            self.best = val
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self):
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    best_epoch: int
    best_val: float
    epochs_run: int
    diverged: bool
    history: list  # one dict per epoch: epoch, lr, wd, terms..., val_loss
    term_names: tuple


def session_input(record, modality):
    """Assemble the model input stream for one session."""
    if modality == "spikes":
        return record.spikes
    if modality == "lfp":
        return record.lfp
    if modality == "mm":
        mean, std = record.stats["spikes"]
        spk = (record.spikes.astype(np.float64) - mean) / std
        return np.concatenate([spk, record.lfp], axis=-1)
    raise ValueError(f"unknown modality {modality!r}")


def validation_split(train_idx, val_frac, seed, stream=13):
    """Carve a fixed validation subset out of the train sequences."""
    train_idx = np.asarray(train_idx)
    n_val = max(1, int(round(val_frac * len(train_idx))))
    if n_val >= len(train_idx):
        raise ValueError("validation split would consume every train sequence")
    perm = np.random.default_rng(np.random.SeedSequence([seed, stream])).permutation(
        len(train_idx)
    )
    return np.sort(train_idx[perm[n_val:]]), np.sort(train_idx[perm[:n_val]])


def _epoch_batches(records, idx_by_session, batch_size, rng):
    jobs = []
    for r in records:
        idx = idx_by_session[r.session_id].copy()
        rng.shuffle(idx)
        for k in range(0, len(idx), batch_size):
            jobs.append((r, idx[k : k + batch_size]))
    return [jobs[i] for i in rng.permutation(len(jobs))]


def _ensure_recon_head(model, session_id, n_out):
    # the distillation autoencoder readout: one linear map per session,
    # since sessions disagree on channel count
    name = f"distill/{session_id}"
    if f"{name}/w" not in model.params:
        rng = model._head_rng
        model.params[f"{name}/w"] = nk.parameter(
            rng.normal(0.0, 0.02, (model.cfg.d, n_out)), f"{name}/w"
        )
        model.params[f"{name}/b"] = nk.parameter(np.zeros(n_out), f"{name}/b")
    return name


def batch_loss(model, record, seq_idx, cfg, teacher=None, rng=None):
    """One batch's objective; returns (total Tensor, ordered term floats)."""
    x = session_input(record, cfg.modality)[seq_idx]
    sid = record.session_id
    obj = cfg.objective
    parts = []

    if obj in ("mae", "sup"):
        loss_mae, _ = model.mae_forward(x, sid, cfg.modality, rng=rng)
        parts.append(("mae", loss_mae))

    rep = None
    if obj in ("sup", "fullsup", "distill", "distill_sup"):
        rep = model.encode(x, sid, cfg.modality)

    if obj in ("sup", "fullsup", "distill_sup"):
        b_loss = model.behavior_loss(rep, record.behavior[seq_idx], sid)
        parts.append(("behavior", b_loss))

    if obj == "distill":
        name = _ensure_recon_head(model, sid, x.shape[-1])
        pred = nk.linear(rep.pooled, model.params[f"{name}/w"], model.params[f"{name}/b"])
        parts.append(("recon", nk.mse(pred, x)))

    if obj in ("distill", "distill_sup") and cfg.lambda_align > 0:
        t_pooled = teacher.encode_pooled(record.spikes[seq_idx], sid)
        b, t, d = rep.pooled.shape
        align = nk.cosine_alignment(
            nk.reshape(rep.pooled, (b * t, d)), nk.reshape(t_pooled, (b * t, d))
        )
        parts.append(("align", nk.scale(align, cfg.lambda_align)))

    total = parts[0][1]
    for _, p in parts[1:]:
        total = nk.add(total, p)
    terms = {name: float(p.data) for name, p in parts}
    gap = abs(float(total.data) - sum(terms.values()))
    if gap > 1e-6 * max(1.0, abs(float(total.data))):
        raise RuntimeError(f"loss decomposition violated: gap {gap:.3e}")
    return total, terms


def _snapshot(model, teacher=None):
    state = {k: t.data.copy() for k, t in model.parameters.items()}
    if teacher is not None:
        state.update({f"teacher/{k}": t.data.copy() for k, t in teacher.model.parameters.items()})
    return state


def _restore(model, state, teacher=None):
    for k, t in model.parameters.items():
        t.data = state[k].copy()
    if teacher is not None:
        for k, t in teacher.model.parameters.items():
            t.data = state[f"teacher/{k}"].copy()


NO_DECAY = ("/b", "ln", "mask_token", "spike_table", "space/")


def run_training(model, records, cfg, teacher=None, log_path=None, param_filter=None):
    """Train `model` on SessionRecords; returns a TrainResult.

    The model is left holding the best-validation parameters. `teacher`
    is required for alignment objectives and must share the student's
    latent width. `param_filter(name) -> bool`, if given, restricts which
    parameters the optimizer may update (used for embedding-only session
    adaptation); gradients still flow everywhere.
    """
    cfg.validate()
    if cfg.needs_teacher:
        if teacher is None:
            raise ValueError(f"objective {cfg.objective!r} requires a teacher")
        if teacher.model.cfg.d != model.cfg.d:
            raise ValueError(
                f"teacher latent width {teacher.model.cfg.d} != student {model.cfg.d}"
            )
    term_names = OBJECTIVES[cfg.objective]
    if cfg.lambda_align == 0 and "align" in term_names:
        term_names = tuple(n for n in term_names if n != "align")

    fit_idx, val_idx = {}, {}
    for i, r in enumerate(records):
        fit_idx[r.session_id], val_idx[r.session_id] = validation_split(
            r.train_idx, cfg.val_frac, cfg.seed, stream=13 + i
        )
    # distill readouts must exist before the first snapshot/step
    if cfg.objective == "distill":
        for r in records:
            _ensure_recon_head(model, r.session_id, session_input(r, cfg.modality).shape[-1])
    if cfg.objective in ("sup", "fullsup", "distill_sup"):
        for r in records:
            model._ensure_behavior_head(r.session_id, r.behavior.shape[-1])

    opt = nk.AdamW()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    stopper = EarlyStopper(cfg.patience)
    teacher_hash0 = teacher.params_hash() if teacher is not None else None
    unfreeze_at = cfg.unfreeze_epoch if teacher is not None else None
    # when unfreezing is possible the teacher belongs in every snapshot, so
    # a rollback to a pre-unfreeze epoch also rewinds teacher drift
    snap_teacher = teacher if unfreeze_at is not None else None
    best_state = _snapshot(model, snap_teacher)
    best_epoch = -1
    history = []
    diverged = False

    log_f = open(log_path, "w") if log_path else None
    if log_f:
        log_f.write("\t".join(["epoch", "lr", "wd", *term_names, "val_loss"]) + "\n")

    try:
        for epoch in range(cfg.max_epochs):
            lr = cfg.schedule.lr_at(epoch)
            wd = cfg.schedule.wd_at(epoch)
            if unfreeze_at is not None and epoch >= unfreeze_at and teacher.frozen:
                teacher.prefix_names()
                teacher.frozen = False

            opt_params = {t.name: t for t in model.parameters.values()}
            if teacher is not None and not teacher.frozen:
                opt_params.update({t.name: t for t in teacher.model.parameters.values()})
            if param_filter is not None:
                opt_params = {n: t for n, t in opt_params.items() if param_filter(n)}

            sums = dict.fromkeys(term_names, 0.0)
            n_batches = 0
            try:
                for record, idx in _epoch_batches(records, fit_idx, cfg.batch_size, rng):
                    with nk.Tape():
                        total, terms = batch_loss(model, record, idx, cfg, teacher, rng)
                        if not np.isfinite(total.data):
                            raise FloatingPointError("non-finite training loss")
                        grads = nk.backward(total)
                    opt.step(opt_params, grads, lr=lr, weight_decay=wd, no_decay=NO_DECAY)
                    for k, v in terms.items():
                        sums[k] += v
                    n_batches += 1
            except FloatingPointError:
                diverged = True

            if diverged:
                break

            val_loss = evaluate_loss(model, records, val_idx, cfg, teacher)
            row = {
                "epoch": epoch,
                "lr": lr,
                "wd": wd,
                **{k: sums[k] / max(n_batches, 1) for k in term_names},
                "val_loss": val_loss,
            }
            history.append(row)
            if log_f:
                log_f.write(
                    "\t".join(
                        [str(epoch), f"{lr:.8g}", f"{wd:.8g}"]
                        + [f"{row[k]:.8g}" for k in term_names]
                        + [f"{val_loss:.8g}"]
                    )
                    + "\n"
                )
                log_f.flush()

            if stopper.update(val_loss):
                best_state = _snapshot(model, snap_teacher)
                best_epoch = epoch
            if stopper.should_stop:
                break
    finally:
        if log_f:
            log_f.close()

    _restore(model, best_state, snap_teacher)
    if teacher is not None and teacher.frozen and teacher.params_hash() != teacher_hash0:
        raise RuntimeError("frozen teacher parameters changed during training")
    return TrainResult(
        best_epoch=best_epoch,
        best_val=stopper.best,
        epochs_run=len(history),
        diverged=diverged,
        history=history,
        term_names=term_names,
    )


def evaluate_loss(model, records, idx_by_session, cfg, teacher=None, batch_size=None):
    """Objective loss over fixed sequence sets, off-tape.

    Mask plans are drawn from a fresh seed-fixed stream so successive
    epochs score identical masks and validation curves are comparable.
    """
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    total = 0.0
    n = 0
    with nk.no_grad():
        for r in records:
            idx = np.asarray(idx_by_session[r.session_id])
            for k in range(0, len(idx), bs):
                loss, _ = batch_loss(model, r, idx[k : k + bs], cfg, teacher, rng)
                total += float(loss.data) * len(idx[k : k + bs])
                n += len(idx[k : k + bs])
    return total / max(n, 1)


def adapt_session_embeddings(model, records, epochs=5, seed=0, batch_size=32,
                             modality="spikes", schedule=None):
    """Fit only the named sessions' space embeddings, everything else fixed.

    The unseen-subject path: a pretrained model meets new sessions, which
    register fresh space embeddings; a few masked-reconstruction epochs
    train just those vectors. The default schedule is hot and flat: with
    every shared weight frozen there is nothing to destabilize, and a few
    epochs at the pretraining rate would leave fresh embeddings near their
    random init.
    """
    if schedule is None:
        schedule = nk.Schedule(max_lr=0.02, warmup_epochs=0,
                               warmup_start_factor=1.0, wd_start=0.0, wd_end=0.0)
    names = {f"space/{modality}/{r.session_id}" for r in records}
    cfg = TrainConfig(
        objective="mae",
        modality=modality,
        max_epochs=epochs,
        batch_size=batch_size,
        patience=max(epochs, 1),
        seed=seed,
        schedule=schedule,
    )
    return run_training(model, records, cfg, param_filter=lambda n: n in names)


# ---------------------------------------------------------------------------
# checkpointing


def save_model(path, model, train_cfg=None, extra_meta=None):
    """Serialize parameters + enough structure to rebuild the model."""
    arrays = {name: t.data for name, t in model.parameters.items()}
    sessions = []
    for (sid, mod), (emb, lo) in sorted(model.tokenizer.sessions.items()):
        sessions.append(
            {
                "session_id": sid,
                "modality": mod,
                "n_signals": lo.n_signals,
                "n_spike_dims": model.mm_split.get(sid) if mod == "mm" else None,
            }
        )
    behavior_heads = {
        name.split("/")[1]: int(model.params[name].data.shape[1])
        for name in model.params
        if name.startswith("behavior/") and name.endswith("/w")
    }
    tok = model.tokenizer
    meta = {
        "encoder_cfg": dataclasses.asdict(model.cfg),
        "tokenizer": {
            "d": tok.d,
            "patch_sizes": tok.patch_sizes,
            "k_max": tok.k_max,
            "lfp_embed": tok.lfp_embed,
            "conv_kernel": tok.conv_kernel,
            "conv_dilations": list(tok.conv_dilations),
        },
        "sessions": sessions,
        "behavior_heads": behavior_heads,
    }
    if train_cfg is not None:
        meta["train_cfg"] = dataclasses.asdict(train_cfg)
        meta["train_cfg"]["schedule"] = dataclasses.asdict(train_cfg.schedule)
    if extra_meta:
        meta.update(extra_meta)
    container.save_checkpoint(path, arrays, meta)


def load_model(path, names=None):
    """Rebuild a Model from a checkpoint; returns (model, meta).

    Shape disagreements between the stored arrays and the rebuilt
    architecture raise with the offending names. `names` restricts the
    read to a subset of entries (partial load), leaving the rest at init.
    """
    arrays, meta = container.load_checkpoint(path, names=names)
    tcfg = dict(meta["tokenizer"])
    tcfg["conv_dilations"] = tuple(tcfg["conv_dilations"])
    tok = Tokenizer(**tcfg)
    model = Model(EncoderConfig(**meta["encoder_cfg"]), tok, seed=0)
    reg_rng = np.random.default_rng(0)
    for s in meta["sessions"]:
        model.register_session(
            s["session_id"], s["n_signals"], s["modality"], reg_rng,
            n_spike_dims=s.get("n_spike_dims"),
        )
    for sid, n_out in meta.get("behavior_heads", {}).items():
        model._ensure_behavior_head(sid, n_out)

    params = model.parameters
    mismatched = []
    for name, arr in arrays.items():
        if name in params:
            if params[name].data.shape != tuple(arr.shape):
                mismatched.append(f"{name}: {tuple(arr.shape)} vs {params[name].data.shape}")
                continue
            params[name].data = arr.astype(nk.default_dtype())
        elif name.startswith("distill/"):
            model.params[name] = nk.parameter(arr, name)
        else:
            mismatched.append(f"{name}: not part of the configured model")
    if mismatched:
        raise ValueError("checkpoint does not fit rebuilt model: " + "; ".join(mismatched))
    if names is None:
        missing = sorted(set(params) - set(arrays))
        if missing:
            raise ValueError(f"checkpoint is missing parameters: {missing[:8]}")
    return model, meta


def load_teacher(path, modality="spikes"):
    """Checkpoint -> frozen TeacherHandle (alignment needs the full encode
    path: tokenizer tables, space embeddings and encoder stack)."""
    model, meta = load_model(path)
    return TeacherHandle(model, modality=modality), meta
