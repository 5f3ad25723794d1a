"""Training loop: batch assembly, the single-step update, logging, checkpoints.

One step = one forward through both branches, Sinkhorn assignment of the
labeled pixels, one backward pass on ce + lambda*lp, one AdamW update, then
the momentum prototype update.  Prototypes never receive gradients unless
the run is explicitly configured with proto_update = gradient.
"""

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor, NonFiniteError
from .config import MODES, PROTO_UPDATES, RunConfig
from .encoder import band_view
from .model import SmokeModel, bce_loss, downsample_labels, total_loss
from .optim import AdamW, poly_lr
from .prototypes import batch_contrastive_loss
from . import dataio

LOG_HEADER = "step, ce, lp, total"


class TrainDiverged(RuntimeError):
    def __init__(self, step, ce, lp):
        super().__init__(f"non-finite loss at step {step} (ce={ce}, lp={lp})")
        self.step = step
        self.ce = ce
        self.lp = lp


def cubes_to_batch(cubes):
    """(d,h,w) float32 cubes -> (B,h,w,d) float64 network input."""
    return np.stack([np.transpose(np.asarray(c, dtype=np.float64), (1, 2, 0)) for c in cubes])


def batch_stream(n, batch, rng):
    """Shuffled-epoch index batches; epochs are re-drawn as the pool drains."""
    pool = []
    while True:
        while len(pool) < batch:
            pool.extend(rng.permutation(n).tolist())
        yield pool[:batch]
        del pool[:batch]


def _prototype_phase(model, x_indi, labels, cfg):
    """Sinkhorn assignments, the contrastive loss, and the deferred EMA updates.

    Returns (lp, updates) where updates are (c, b, assignment, features)
    tuples applied after the optimizer step.
    """
    bank = model.bank
    d, K, C = model.d, model.K, model.C
    n = labels.shape[0]
    band_losses = []
    updates = []
    for b in range(d):
        z = T.l2_normalize(band_view(x_indi, b, d), axis=-1)
        z_np = z.data
        pos_idx = np.zeros(n, dtype=np.intp)
        for c in range(C):
            sel = np.flatnonzero(labels == c)
            if sel.size == 0:
                continue  # class absent from the batch: no assignment, no update
            assign = bank.assign(c, b, z_np[sel], cfg.epsilon, cfg.sinkhorn_iters)
            pos_idx[sel] = c * K + np.argmax(assign, axis=0)
            updates.append((c, b, assign, z_np[sel]))
        if model.proto_update == "gradient":
            protos = T.reshape(
                T.narrow(model._bank_tensor(), 2, b, 1), (C * K, bank.dim)
            )
        else:
            protos = Tensor(bank.band_flat(b))
        band_losses.append(batch_contrastive_loss(z, protos, pos_idx, cfg.tau))
    lp = band_losses[0]
    for extra in band_losses[1:]:
        lp = lp + extra
    return lp / float(d), updates


def train_step(model, opt, x, masks, cfg, lr):
    """One optimization step; returns (ce, lp, total) as floats."""
    out = model.forward(x)
    labels = downsample_labels(masks, out["H"], out["W"], model.stride).reshape(-1)
    ce = bce_loss(out["prob"], labels.astype(np.float64))
    updates = []
    if model.mode == "full":
        lp, updates = _prototype_phase(model, out["x_indi"], labels, cfg)
    else:
        lp = Tensor(0.0)
    total = total_loss(ce, lp, cfg.lam)
    if not np.isfinite(total.data):
        raise TrainDiverged(opt.t, float(ce.data), float(lp.data))
    opt.zero_grad()
    T.backward(total)
    opt.step(lr)
    model.sync_prototypes()
    if model.proto_update == "momentum":
        for c, b, assign, feats in updates:
            model.bank.update(c, b, assign, feats)
    return float(ce.data), float(lp.data), float(total.data)


def train(cfg: RunConfig, data, iterations=None, log_path=None, ckpt_path=None, on_step=None):
    """Train a model on (cube, mask) pairs; returns (model, log_lines)."""
    cfg.validate()
    if not data:
        raise ValueError("empty training set")
    d0, h0, w0 = np.asarray(data[0][0]).shape
    if d0 != cfg.groups:
        raise ValueError(f"config expects {cfg.groups} bands, data has {d0}")
    model = SmokeModel(
        d=cfg.groups,
        D=cfg.D,
        K=cfg.K,
        mode=cfg.mode,
        mu=cfg.mu,
        proto_update=cfg.proto_update,
        seed=cfg.seed,
    )
    opt = AdamW(model.params(), cfg.lr, cfg.weight_decay)
    iters = cfg.iterations if iterations is None else iterations
    batches = batch_stream(len(data), cfg.batch, np.random.default_rng((cfg.seed, 1)))
    lines = [LOG_HEADER]
    for step in range(iters):
        idx = next(batches)
        x = cubes_to_batch([data[i][0] for i in idx])
        masks = np.stack([data[i][1] for i in idx])
        lr = poly_lr(cfg.lr, step, iters)
        try:
            ce, lp, tot = train_step(model, opt, x, masks, cfg, lr)
        except NonFiniteError as exc:
            raise TrainDiverged(step, float("nan"), float("nan")) from exc
        lines.append(f"{step}, {ce:.17g}, {lp:.17g}, {tot:.17g}")
        if on_step is not None:
            on_step(step, ce, lp, tot)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    if ckpt_path is not None:
        dataio.save_checkpoint(ckpt_path, state_dict(model, step=iters))
    return model, lines


# ---------------------------------------------------------------------------
# checkpoint state


def state_dict(model, step=0):
    """Flat name -> array state: parameters, prototype bank, and shape metadata."""
    state = OrderedDict()
    state["meta.d"] = np.array(model.d)
    state["meta.D"] = np.array(model.D)
    state["meta.K"] = np.array(model.K)
    state["meta.mode"] = np.array(MODES.index(model.mode))
    state["meta.proto_update"] = np.array(PROTO_UPDATES.index(model.proto_update))
    state["meta.step"] = np.array(step)
    for name, p in model.params().items():
        state[name] = p.data
    if model.bank is not None and "bank.p" not in state:
        state["bank.p"] = model.bank.p
    return state


def model_from_state(state):
    """Rebuild a model from checkpoint tensors; weights are the stored float32 values."""
    for key in ("meta.d", "meta.D", "meta.K", "meta.mode", "meta.proto_update"):
        if key not in state:
            raise dataio.FormatError(f"checkpoint is missing {key}")
    model = SmokeModel(
        d=int(state["meta.d"]),
        D=int(state["meta.D"]),
        K=int(state["meta.K"]),
        mode=MODES[int(state["meta.mode"])],
        proto_update=PROTO_UPDATES[int(state["meta.proto_update"])],
        seed=0,
    )
    params = model.params()
    for name, p in params.items():
        if name not in state:
            raise dataio.FormatError(f"checkpoint is missing parameter {name!r}")
        arr = np.asarray(state[name], dtype=np.float64)
        if arr.shape != p.data.shape:
            raise dataio.FormatError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, expected {p.data.shape}"
            )
        p.data = arr
    if model.bank is not None:
        arr = np.asarray(state["bank.p"], dtype=np.float64)
        if arr.shape != model.bank.p.shape:
            raise dataio.FormatError("checkpoint prototype bank has the wrong shape")
        model.bank.p = arr
        if model.proto_update == "gradient":
            model._bank_param.data = arr
    return model
