"""Dynamic VAE: a VAE whose decoder starts with a linear dynamic layer.

For a window of ``k = order + 1`` succeeding frames the encoder maps the
concatenated frames to a diagonal Gaussian over ``x`` in ``R^{k n}``. The
decoder multiplies a sample by the block lower-triangular matrix ``F``
(first order: ``[[I, 0], [A, B]]``), splits the result into ``k`` latent
states and decodes each with one shared network ``C``.

The minimised objective per window is::

    sum_observed (y_hat - y)^2 / (2 sigma_y2) + KL(q(x | y) || N(0, I))

averaged over the batch, plus ``lam * ||A A^T + B B^T - I||_F^2`` (first
order) or the block-Toeplitz penalty with ``reg_weights`` (second order).
Additive constants of the Gaussian log-likelihood are dropped.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dynamics
from .errors import FormatError, ShapeError, TrainingDivergedError, UsageError
from .nn import AdamState, Dense, Mlp, adam_step, backward, clip_global_norm, forward, gradcheck_detail
from .tensor import Prng, as_tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
MODEL_MAGIC = b"DVMD"
MODEL_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    lam: float = 100.0
    sigma_y2: float = 8.0
    latent_dim: int = 10
    clip_norm: float = 5.0
    validation_fraction: float = 0.0
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (128,)
    hidden_activation: str = "leaky_relu"
    decoder_output: str = "sigmoid"
    encoder_output: str = "identity"
    order: int = 1
    reg_weights: tuple | None = None  # order 2 only; defaults to (lam, lam, lam)
    init_scale: float = 0.9

    def __post_init__(self):
        self.encoder_hidden = tuple(int(h) for h in self.encoder_hidden)
        self.decoder_hidden = tuple(int(h) for h in self.decoder_hidden)
        if self.reg_weights is not None:
            self.reg_weights = tuple(float(w) for w in self.reg_weights)
        if self.epochs < 0:
            raise UsageError("epochs: must be non-negative")
        if self.batch_size < 1:
            raise UsageError("batch_size: must be at least 1")
        if self.latent_dim < 1:
            raise UsageError("latent_dim: must be positive")
        if self.sigma_y2 <= 0:
            raise UsageError("sigma_y2: must be positive")
        if self.lam < 0:
            raise UsageError("lambda: must be non-negative")
        if self.learning_rate <= 0:
            raise UsageError("learning_rate: must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise UsageError("validation_fraction: must lie in [0, 1)")
        if self.order not in (1, 2):
            raise UsageError("order: only 1 and 2 are supported")

    @classmethod
    def from_dict(cls, doc):
        """Build from a JSON-style mapping; ``lambda`` is accepted for ``lam``."""
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise UsageError(f"{key}: unknown training option")
        return cls(**doc)

    def to_dict(self):
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        doc["encoder_hidden"] = list(self.encoder_hidden)
        doc["decoder_hidden"] = list(self.decoder_hidden)
        if self.reg_weights is not None:
            doc["reg_weights"] = list(self.reg_weights)
        return doc


@dataclass
class DvaeModel:
    n: int
    d: int
    order: int
    blocks: list  # [A, B] or [F1, ..., F5]
    decoder: Mlp  # n -> d
    encoder: Mlp  # k d -> 2 k n
    sigma_y2: float
    lam: float
    reg_weights: tuple = (1.0, 1.0, 1.0)
    frame_shape: tuple | None = None
    seed: int = 0
    training: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.order + 1
        if self.sigma_y2 <= 0 or self.lam < 0:
            raise UsageError("sigma_y2 must be positive and lam non-negative")
        if self.decoder.in_dim != self.n or self.decoder.out_dim != self.d:
            raise ShapeError(f"decoder must map {self.n} -> {self.d}")
        if self.encoder.in_dim != k * self.d or self.encoder.out_dim != 2 * k * self.n:
            raise ShapeError(f"encoder must map {k * self.d} -> {2 * k * self.n}")
        self.blocks = [as_tensor(b, ndim=2) for b in self.blocks]
        if len(self.blocks) != len(dynamics.block_positions(self.order)):
            raise ShapeError("wrong number of dynamic-layer blocks")
        if any(b.shape != (self.n, self.n) for b in self.blocks):
            raise ShapeError("dynamic-layer blocks must be n x n")
        self.reg_weights = tuple(float(w) for w in self.reg_weights)

    @classmethod
    def create(cls, d, config, frame_shape=None):
        """Fresh model: Glorot networks and a dynamic layer that starts stationary.

        The first-order layer starts at ``A = s^2 I`` and ``B = chol(I - A A^T)``
        with ``s = config.init_scale``; the second-order layer starts at the
        embedding of that first-order process.
        """
        n = config.latent_dim
        k = config.order + 1
        rng = Prng(config.seed)
        decoder = Mlp.create(
            [n, *config.decoder_hidden, d], rng, config.hidden_activation, config.decoder_output
        )
        encoder = Mlp.create(
            [k * d, *config.encoder_hidden, 2 * k * n], rng, config.hidden_activation, config.encoder_output
        )
        a = config.init_scale * config.init_scale
        b = math.sqrt(1.0 - a * a)
        eye = np.eye(n)
        if config.order == 1:
            blocks = [a * eye, dynamics.stationary_B(a * eye)]
        else:
            blocks = [a * eye, b * eye, a * a * eye, a * b * eye, b * eye]
        reg = config.reg_weights or (config.lam,) * 3
        if config.order == 1:
            reg = (1.0, 1.0, 1.0)
        return cls(
            n, d, config.order, blocks, decoder, encoder, config.sigma_y2, config.lam, reg,
            tuple(frame_shape) if frame_shape else None, config.seed,
        )

    @property
    def window(self):
        return self.order + 1

    @property
    def A(self):
        return self.blocks[0] if self.order == 1 else None

    @property
    def B(self):
        return self.blocks[1] if self.order == 1 else None

    @property
    def dyn(self):
        if self.order != 1:
            raise UsageError("dyn is defined for first-order models; use var2_model()")
        return dynamics.Var1Model(self.blocks[0], self.blocks[1])

    def dense_F(self):
        return dynamics.DynamicLayerF(self.order, self.blocks).dense()

    def params(self):
        return [*self.blocks, *self.decoder.params(), *self.encoder.params()]

    def regularizer(self):
        if self.order == 1:
            return self.lam * dynamics.stationarity_residual(*self.blocks)
        return dynamics.order2_regularizer(*self.blocks, *self.reg_weights)

    def regularizer_grads(self):
        if self.order == 1:
            ga, gb = dynamics.stationarity_grad(*self.blocks)
            return [self.lam * ga, self.lam * gb]
        return dynamics.order2_regularizer_grad(*self.blocks, *self.reg_weights)

    def stationarity_residual(self):
        """Unweighted constraint violation (first order) or unit-weight penalty (second order)."""
        if self.order == 1:
            return dynamics.stationarity_residual(*self.blocks)
        return dynamics.order2_regularizer(*self.blocks, 1.0, 1.0, 1.0)

    def var2_model(self):
        """Second-order VAR recovered from the trained F1 and F3 blocks."""
        if self.order != 2:
            raise UsageError("var2_model needs a second-order model")
        return dynamics.solve_order2(self.blocks[0], self.blocks[2], reg_weights=self.reg_weights)

    def copy(self):
        return DvaeModel(
            self.n, self.d, self.order, [b.copy() for b in self.blocks], self.decoder.copy(),
            self.encoder.copy(), self.sigma_y2, self.lam, self.reg_weights, self.frame_shape,
            self.seed, dict(self.training),
        )


def _as_windows(model, frames):
    frames = as_tensor(frames, name="frames")
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3 or frames.shape[1:] != (model.window, model.d):
        raise ShapeError(f"expected windows of shape (batch, {model.window}, {model.d}), got {frames.shape}")
    return frames


def decoder_f_theta(model, x):
    """Decode latent noise: dynamic layer, split, shared decoder.

    ``x`` has shape ``(batch, k n)``; returns a list of ``k`` arrays of shape
    ``(batch, d)``, one per frame of the window.
    """
    x = as_tensor(x, name="x")
    single = x.ndim == 1
    x = np.atleast_2d(x)
    k, n = model.window, model.n
    if x.shape[1] != k * n:
        raise ShapeError(f"expected latent width {k * n}, got {x.shape[1]}")
    h = x @ model.dense_F().T
    y = forward(model.decoder, h.reshape(-1, n)).reshape(x.shape[0], k, model.d)
    out = [y[:, j] for j in range(k)]
    return [o[0] for o in out] if single else out


def encode(model, frames, rng=None, eps=None, masks=None):
    """Posterior parameters and a reparameterised sample for windows of frames.

    Returns ``(mu, logvar, x)``, each ``(batch, k n)``. ``eps`` overrides the
    standard normal draw (``rng`` is then unused); without either, ``x = mu``.
    Unobserved pixels (``masks`` False) are zeroed before encoding.
    """
    frames = _as_windows(model, frames)
    if masks is not None:
        frames = frames * masks
    out = forward(model.encoder, frames.reshape(frames.shape[0], -1))
    kn = model.window * model.n
    mu = out[:, :kn]
    logvar = np.clip(out[:, kn:], LOGVAR_MIN, LOGVAR_MAX)
    if eps is None:
        eps = rng.gaussian(mu.shape) if rng is not None else np.zeros_like(mu)
    return mu, logvar, mu + np.exp(0.5 * logvar) * eps


@dataclass
class LossResult:
    loss: float
    recon: float  # batch mean
    kl: float  # batch mean
    reg: float  # weighted regulariser
    grads: list | None = None


def dvae_loss(model, frames, masks=None, rng=None, eps=None, need_grads=True):
    """Regularised negative ELBO of a batch of windows and its gradients.

    ``frames`` is ``(batch, k, d)``; ``masks`` (same shape, ``True`` =
    observed) removes hidden pixels from the reconstruction sum and from the
    encoder input. Noise comes from ``eps`` when given, else from ``rng``.
    Gradients follow ``model.params()`` order.
    """
    frames = _as_windows(model, frames)
    batch = frames.shape[0]
    if batch == 0:
        raise UsageError("dvae_loss needs a non-empty batch")
    k, n, d = model.window, model.n, model.d
    kn = k * n
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != frames.shape:
            raise ShapeError("masks must match frames")
        weights = masks.astype(np.float64)
        enc_in = (frames * weights).reshape(batch, -1)
    else:
        weights = None
        enc_in = frames.reshape(batch, -1)

    enc_out, enc_cache = forward(model.encoder, enc_in, return_cache=True)
    mu = enc_out[:, :kn]
    raw_lv = enc_out[:, kn:]
    logvar = np.clip(raw_lv, LOGVAR_MIN, LOGVAR_MAX)
    if eps is None:
        if rng is None:
            raise UsageError("dvae_loss needs rng or eps")
        eps = rng.gaussian((batch, kn))
    std = np.exp(0.5 * logvar)
    x = mu + std * eps

    F = model.dense_F()
    h = x @ F.T
    y_hat, dec_cache = forward(model.decoder, h.reshape(batch * k, n), return_cache=True)
    y_hat = y_hat.reshape(batch, k, d)
    diff = y_hat - frames
    if weights is not None:
        diff = diff * weights
    recon = np.sum(diff * diff, axis=(1, 2)) / (2.0 * model.sigma_y2)
    var = np.exp(logvar)
    kl = 0.5 * np.sum(mu * mu + var - 1.0 - logvar, axis=1)
    reg = model.regularizer()
    loss = float(np.mean(recon + kl) + reg)
    result = LossResult(loss, float(np.mean(recon)), float(np.mean(kl)), float(reg))
    if not need_grads:
        return result

    # reverse pass
    g_yhat = (diff / (model.sigma_y2 * batch)).reshape(batch * k, d)
    dec_grads, g_h = backward(model.decoder, None, g_yhat, cache=dec_cache)
    g_h = g_h.reshape(batch, kn)
    g_F = g_h.T @ x
    g_x = g_h @ F
    block_grads = []
    for (r, c), reg_g in zip(dynamics.block_positions(model.order), model.regularizer_grads()):
        block_grads.append(g_F[r * n : (r + 1) * n, c * n : (c + 1) * n] + reg_g)
    g_mu = g_x + mu / batch
    g_lv = g_x * eps * 0.5 * std + 0.5 * (var - 1.0) / batch
    g_lv = g_lv * ((raw_lv > LOGVAR_MIN) & (raw_lv < LOGVAR_MAX))
    enc_grads, _ = backward(model.encoder, None, np.concatenate([g_mu, g_lv], axis=1), cache=enc_cache)
    result.grads = [*block_grads, *dec_grads, *enc_grads]
    return result


def kink_preactivations(model, frames, masks=None, rng=None, eps=None):
    """Pre-activations of kinked units along the loss computation (for gradcheck)."""
    from .nn import preactivations

    frames = _as_windows(model, frames)
    enc_in = frames if masks is None else frames * masks
    mu, logvar, x = encode(model, frames, rng=rng, eps=eps, masks=masks)
    h = (x @ model.dense_F().T).reshape(-1, model.n)
    parts = [preactivations(model.encoder, enc_in.reshape(frames.shape[0], -1)), preactivations(model.decoder, h)]
    return np.concatenate(parts)


def loss_gradcheck(model, frames, masks=None, seed=0, n_coords=None):
    """Check :func:`dvae_loss` gradients against central differences.

    The reparameterisation noise is frozen so the loss is deterministic.
    Every coordinate is checked unless ``n_coords`` is given.
    """
    frames = _as_windows(model, frames)
    eps = Prng(seed).gaussian((frames.shape[0], model.window * model.n))
    params = model.params()
    total = sum(p.size for p in params)

    def loss_fn():
        res = dvae_loss(model, frames, masks, eps=eps)
        return res.loss, res.grads

    def kink_fn():
        return kink_preactivations(model, frames, masks, eps=eps)

    return gradcheck_detail(loss_fn, params, seed, n_coords=n_coords or total, kink_fn=kink_fn)


def reference_gradcheck(seed=0, order=1, masked=False):
    """Gradcheck on the tiny reference model: ``d = 4``, ``n = 1``, two dense layers per network.

    The dynamic layer is pushed off the stationary set so the regulariser
    gradient takes part in the check.
    """
    config = TrainConfig(
        latent_dim=1, encoder_hidden=(6,), decoder_hidden=(6,), sigma_y2=0.5, lam=100.0, seed=seed, order=order
    )
    model = DvaeModel.create(4, config)
    rng = Prng(seed + 1)
    for b in model.blocks:
        b += 0.05 * rng.gaussian(b.shape)
    frames = rng.uniform((5, model.window, 4))
    masks = rng.uniform(frames.shape) >= 0.3 if masked else None
    return loss_gradcheck(model, frames, masks, seed)


def reconstruction_error(model, frames, masks=None):
    """Mean squared error over observed pixels, decoding the posterior mean."""
    frames = _as_windows(model, frames)
    _, _, x = encode(model, frames, masks=masks)
    y_hat = np.stack(decoder_f_theta(model, x), axis=1)
    sq = (y_hat - frames) ** 2
    if masks is None:
        return float(np.mean(sq))
    masks = np.asarray(masks, dtype=bool)
    return float(np.sum(sq * masks) / max(int(masks.sum()), 1))


def estimate_initial_state(model, y1, y2, y3=None):
    """Posterior-mean latent state of the first frame of a window (no sampling).

    For a second-order model pass ``y3`` as well; the states of the first
    two frames are returned as a ``(2, n)`` array.
    """
    frames = [y1, y2] if model.order == 1 else [y1, y2, y3]
    if any(f is None for f in frames):
        raise UsageError(f"a {model.window}-frame window is needed")
    window = np.stack([as_tensor(f, ndim=1, name="frame") for f in frames])[None]
    mu, _, _ = encode(model, window)
    # with x = mu the dynamic layer passes the first block through, h1 = x1
    if model.order == 1:
        return mu[0, : model.n].copy()
    h = mu[0] @ model.dense_F().T
    return h[: 2 * model.n].reshape(2, model.n)


def latent_trajectory(model, h0, steps, rng):
    if model.order == 1:
        return dynamics.sample_var1(model.dyn, h0, steps, rng)
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim == 1:
        h0 = np.stack([h0, h0])
    return dynamics.sample_var2(model.var2_model(), h0[0], h0[1], steps, rng)


def synthesize(model, h0, steps, rng, noise=False):
    """Sample latent dynamics from ``h0`` and decode every state.

    First order: ``h0`` is one state. Second order: a ``(2, n)`` array of the
    two initial states (a single state is repeated). With ``noise`` each
    pixel gets ``N(0, sigma_y2)`` observation noise, drawn after the latent
    innovations, and the result is clipped into [0, 1].
    """
    states = latent_trajectory(model, h0, steps, rng)
    if states.shape[0] == 0:
        return np.zeros((0, model.d))
    frames = forward(model.decoder, states)
    if noise:
        frames = np.clip(frames + math.sqrt(model.sigma_y2) * rng.gaussian(frames.shape), 0.0, 1.0)
    return frames


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    recon: float
    kl: float
    stationarity: float
    val_loss: float | None
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def losses(self):
        return np.array([e.loss for e in self.epochs])

    def to_dict(self):
        return {"epochs": [asdict(e) for e in self.epochs]}


def _train_seed(seed):
    return int(Prng(seed).next_u64(1)[0])


def train(model, frames, config, masks=None, callback=None):
    """Minibatch Adam on :func:`dvae_loss`; mutates and returns ``model``.

    ``frames`` are windows ``(count, k, d)`` (see ``data.make_windows``).
    Shuffling and reparameterisation noise come from one stream derived from
    ``config.seed``, so a run is reproducible bit-for-bit. A validation tail
    of ``validation_fraction`` windows (chronologically last) is held out
    and scored each epoch with a fixed noise stream.

    ``callback(record)`` is invoked after every epoch.
    """
    frames = _as_windows(model, frames)
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.shape != frames.shape:
            raise ShapeError("masks must match frames")
    total = frames.shape[0]
    if total < 1:
        raise UsageError("training needs at least one window")
    n_val = int(math.ceil(config.validation_fraction * total)) if config.validation_fraction > 0 else 0
    if n_val >= total:
        raise UsageError("validation_fraction leaves no training windows")
    n_train = total - n_val
    train_x, val_x = frames[:n_train], frames[n_train:]
    train_m = None if masks is None else masks[:n_train]
    val_m = None if masks is None else masks[n_train:]

    rng = Prng(_train_seed(config.seed))
    params = model.params()
    state = AdamState(lr=config.learning_rate)
    report = TrainReport()
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n_train)
        sums = np.zeros(3)
        for lo in range(0, n_train, bs):
            idx = order[lo : lo + bs]
            res = dvae_loss(model, train_x[idx], None if train_m is None else train_m[idx], rng=rng)
            if not math.isfinite(res.loss):
                raise TrainingDivergedError(epoch)
            if not math.isfinite(clip_global_norm(res.grads, config.clip_norm)):
                raise TrainingDivergedError(epoch)
            adam_step(params, res.grads, state)
            sums += len(idx) * np.array([res.recon + res.kl, res.recon, res.kl])
        means = sums / n_train
        reg = model.regularizer()
        loss = float(means[0] + reg)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch)
        val_loss = None
        if n_val:
            val_loss = dvae_loss(model, val_x, val_m, rng=Prng(config.seed), need_grads=False).loss
        record = EpochRecord(
            epoch, loss, float(means[1]), float(means[2]), model.stationarity_residual(), val_loss,
            time.perf_counter() - start,
        )
        report.epochs.append(record)
        if callback is not None:
            callback(record)
    model.training = {
        "epochs": int(model.training.get("epochs", 0)) + config.epochs,
        "final_loss": report.epochs[-1].loss if report.epochs else None,
        "windows": int(n_train),
        "config": config.to_dict(),
    }
    return model, report


# --- checkpoints ----------------------------------------------------------


def _header(model):
    return {
        "format": "DVMD",
        "n": model.n,
        "d": model.d,
        "order": model.order,
        "sigma_y2": model.sigma_y2,
        "lambda": model.lam,
        "reg_weights": list(model.reg_weights),
        "seed": model.seed,
        "frame_shape": list(model.frame_shape) if model.frame_shape else None,
        "decoder": model.decoder.spec(),
        "encoder": model.encoder.spec(),
        "parameter_order": ["dynamic blocks", "decoder W,b per layer", "encoder W,b per layer"],
        "training": model.training,
    }


def save_model(model, path):
    """Write a DVMD checkpoint.

    Layout: ``b"DVMD"``, u16 version, u32 header length, UTF-8 JSON header
    (sorted keys), then every parameter as little-endian f64 in
    ``model.params()`` order (A, B or F1..F5, decoder ``W, b`` per layer,
    encoder ``W, b`` per layer), each array row-major.
    """
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<HI", MODEL_VERSION, len(header)))
        fh.write(header)
        for p in model.params():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_model(path):
    buf = Path(path).read_bytes()
    if len(buf) < 10:
        raise FormatError("file shorter than the DVMD preamble", len(buf))
    if buf[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}", 0)
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if len(buf) < 10 + hlen:
        raise FormatError("truncated header", len(buf))
    try:
        head = json.loads(buf[10 : 10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header is not valid JSON: {exc}", 10) from exc
    try:
        n, d, order = int(head["n"]), int(head["d"]), int(head["order"])
        nets = [head["decoder"], head["encoder"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"header misses field {exc}", 10) from exc
    pos = 10 + hlen

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(buf):
            raise FormatError("truncated parameter block", len(buf))
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos = end
        return arr

    blocks = [take((n, n)) for _ in dynamics.block_positions(order)]
    built = []
    for spec in nets:
        layers = []
        for layer in spec:
            w = take((layer["out"], layer["in"]))
            b = take((layer["out"],))
            layers.append(Dense(w, b, layer["activation"]))
        built.append(Mlp(layers))
    if pos != len(buf):
        raise FormatError("trailing bytes after parameters", pos)
    shape = head.get("frame_shape")
    return DvaeModel(
        n, d, order, blocks, built[0], built[1], float(head["sigma_y2"]), float(head["lambda"]),
        tuple(head.get("reg_weights", (1.0, 1.0, 1.0))), tuple(shape) if shape else None,
        int(head.get("seed", 0)), head.get("training", {}),
    )
