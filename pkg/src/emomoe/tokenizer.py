"""VQ motion tokenizer: temporal-conv encoder, nearest-code quantizer with a
straight-through gradient, and a conv decoder back to motion frames.

Codebook training uses the plain embedding-loss route (no EMA updates); the
codebook is seeded from K-means over initial encoder outputs so codes start
on the data manifold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Adam, ContractViolation, RngStream, Tensor, backward, no_grad
from .core import tensor as T
from .core.linalg import kmeans


@dataclass
class TokenizerConfig:
    channels: int = 8
    codebook_size: int = 64
    code_dim: int = 16
    downsample_rate: int = 4
    width: int = 48
    commitment_beta: float = 0.25
    epochs: int = 40
    batch_size: int = 32
    lr: float = 2e-3
    val_fraction: float = 0.05

    def __post_init__(self):
        if self.downsample_rate < 1:
            raise ContractViolation("downsample_rate must be positive")
        if self.codebook_size < 2:
            raise ContractViolation("codebook needs at least 2 codes")


def pad_frames(frames: np.ndarray, rate: int) -> np.ndarray:
    """Right-pad by repeating the last frame until T divides the rate."""
    t = frames.shape[0]
    rem = t % rate
    if rem == 0:
        return frames
    tail = np.repeat(frames[-1:], rate - rem, axis=0)
    return np.concatenate([frames, tail], axis=0)


class MotionTokenizer:
    """Encoder/decoder pair over a learnable codebook."""

    def __init__(self, config: TokenizerConfig, rng: RngStream):
        self.config = config
        c, w, d = config.channels, config.width, config.code_dim
        r = config.downsample_rate
        k1 = max(2 * r, 3)
        self._k1 = k1
        scale = 0.3
        self.params: dict[str, Tensor] = {}

        def par(name, shape, s=scale):
            t = Tensor(rng.normal(shape, s / np.sqrt(shape[-2] if len(shape) > 1 else 1)),
                       requires_grad=True, name=name)
            self.params[name] = t
            return t

        def bias(name, n):
            t = Tensor(np.zeros(n), requires_grad=True, name=name)
            self.params[name] = t
            return t

        self.enc_w1 = par("enc.conv1.w", (k1, c, w))
        self.enc_b1 = bias("enc.conv1.b", w)
        self.enc_w2 = par("enc.conv2.w", (3, w, w))
        self.enc_b2 = bias("enc.conv2.b", w)
        self.enc_w3 = par("enc.out.w", (w, d))
        self.enc_b3 = bias("enc.out.b", d)

        self.codebook = Tensor(rng.normal((config.codebook_size, d), 0.5),
                               requires_grad=True, name="codebook")
        self.params["codebook"] = self.codebook

        self.dec_w1 = par("dec.in.w", (d, w))
        self.dec_b1 = bias("dec.in.b", w)
        self.dec_wt = par("dec.tokconv.w", (3, w, w))
        self.dec_bt = bias("dec.tokconv.b", w)
        self.dec_w2 = par("dec.conv1.w", (5, w, w))
        self.dec_b2 = bias("dec.conv1.b", w)
        self.dec_w3 = par("dec.out.w", (w, c))
        self.dec_b3 = bias("dec.out.b", c)

    # -- encoder / decoder ----------------------------------------------------

    def encode(self, frames, return_hidden: bool = False) -> Tensor:
        """Motion frames (T, D) or (B, T, D) to embeddings of length ceil(T/rate).

        ``return_hidden`` taps the penultimate (width-sized) activations
        instead of the code-width output; evaluation features read from there.
        """
        single = False
        arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames, float)
        if arr.ndim == 2:
            arr, single = arr[None], True
        r = self.config.downsample_rate
        if arr.shape[1] < r:
            raise ContractViolation(
                f"encode: {arr.shape[1]} frames < downsample rate {r}"
            )
        if arr.shape[2] != self.config.channels:
            raise ContractViolation(
                f"encode: expected {self.config.channels} channels, got {arr.shape[2]}"
            )
        if arr.shape[1] % r:
            arr = np.stack([pad_frames(a, r) for a in arr])
        if isinstance(frames, Tensor) and not single and arr.shape == frames.shape:
            x = frames  # keep the caller's graph attached
        else:
            x = Tensor(arr)
        pad_total = self._k1 - r
        h = T.relu(T.conv1d(x, self.enc_w1, self.enc_b1, stride=r,
                            pad_left=pad_total // 2,
                            pad_right=pad_total - pad_total // 2))
        h = T.relu(T.conv1d(h, self.enc_w2, self.enc_b2, 1, 1, 1))
        if return_hidden:
            return h[0] if single else h
        e = h @ self.enc_w3 + self.enc_b3
        return e[0] if single else e

    def quantize(self, e) -> tuple[Tensor, np.ndarray]:
        """Nearest codebook row per embedding; ties go to the lowest index.

        Returns the gathered code vectors (differentiable into the codebook)
        and the integer id array.
        """
        evals = e.data if isinstance(e, Tensor) else np.asarray(e, float)
        if evals.shape[-1] != self.config.code_dim:
            raise ContractViolation(
                f"quantize: embedding width {evals.shape[-1]} != "
                f"code width {self.config.code_dim}"
            )
        diff = evals[..., None, :] - self.codebook.data
        d2 = (diff * diff).sum(axis=-1)
        ids = d2.argmin(axis=-1)
        return T.rows(self.codebook, ids), ids

    def straight_through(self, e: Tensor, z: Tensor) -> Tensor:
        """Decoder input whose gradient is copied through to the encoder."""
        return e + (z - e).detach()

    def decode_codes(self, z) -> Tensor:
        """Code vectors (..., L, d_code) back to frames (..., L*rate, D)."""
        single = False
        if (z.data if isinstance(z, Tensor) else np.asarray(z)).ndim == 2:
            z = z if isinstance(z, Tensor) else Tensor(z)
            z = T.reshape(z, (1,) + z.shape)
            single = True
        elif not isinstance(z, Tensor):
            z = Tensor(z)
        h = T.relu(z @ self.dec_w1 + self.dec_b1)
        h = T.relu(T.conv1d(h, self.dec_wt, self.dec_bt, 1, 1, 1))  # token context
        h = T.repeat_time(h, self.config.downsample_rate)
        h = T.relu(T.conv1d(h, self.dec_w2, self.dec_b2, 1, 2, 2))
        out = h @ self.dec_w3 + self.dec_b3
        return out[0] if single else out

    def decode_ids(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.min() < 0 or ids.max() >= self.config.codebook_size:
            raise ContractViolation(
                f"decode_ids: id out of range [0, {self.config.codebook_size})"
            )
        return self.decode_codes(T.rows(self.codebook, ids))

    # -- convenience round trip ------------------------------------------------

    def tokenize(self, frames: np.ndarray) -> np.ndarray:
        with no_grad():
            _, ids = self.quantize(self.encode(frames))
        return ids

    def detokenize(self, ids: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.decode_ids(ids).data

    # -- losses -----------------------------------------------------------------

    def vq_loss(self, frames: Tensor, recon: Tensor, e: Tensor, z: Tensor
                ) -> tuple[Tensor, dict[str, float]]:
        """Reconstruction + embedding + commitment terms."""
        l_re = ((recon - frames) ** 2).mean()
        l_embed = ((e.detach() - z) ** 2).sum()
        l_commit = ((e - z.detach()) ** 2).sum() * self.config.commitment_beta
        total = l_re + l_embed + l_commit
        parts = {
            "re": l_re.item(),
            "embed": l_embed.item(),
            "commit": l_commit.item(),
        }
        return total, parts

    def forward(self, frames: Tensor) -> tuple[Tensor, Tensor, Tensor, np.ndarray]:
        e = self.encode(frames)
        z, ids = self.quantize(e)
        recon = self.decode_codes(self.straight_through(e, z))
        return recon, e, z, ids

    # -- persistence --------------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = np.asarray(state[name], dtype=np.float64).reshape(p.shape)


@dataclass
class TokenizerFitResult:
    train_losses: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    code_usage: float = 0.0
    signal_variance: float = 0.0

    @property
    def relative_mse(self) -> float:
        return self.val_mse[-1] / self.signal_variance


def fit_tokenizer(
    frames: np.ndarray,
    config: TokenizerConfig,
    rng: RngStream,
) -> tuple[MotionTokenizer, TokenizerFitResult]:
    """Train on a stacked (N, T, D) corpus; returns the model and fit stats.

    Runs a short plain-autoencoder warm-up first, then seeds the codebook by
    K-means over the warmed-up encoder's outputs before the quantized phase;
    codes that go a whole epoch unused are re-seeded at encoder outputs.
    Without these steps the commitment pull collapses the codebook onto a
    handful of entries before reconstruction has shaped the encoder.
    """
    tok = MotionTokenizer(config, rng.child("init"))
    order = rng.child("split").permutation(frames.shape[0])
    n_val = max(1, int(round(config.val_fraction * frames.shape[0])))
    val, train = frames[order[:n_val]], frames[order[n_val:]]

    opt = Adam(list(tok.params.values()), lr=config.lr)
    batches = rng.child("batches")
    result = TokenizerFitResult()
    result.signal_variance = float(frames.reshape(-1, frames.shape[-1]).var(axis=0).mean())

    warmup = max(1, config.epochs // 5)
    for _ in range(warmup):
        perm = batches.permutation(train.shape[0])
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, train.shape[0], config.batch_size):
            batch = Tensor(train[perm[start : start + config.batch_size]])
            recon = tok.decode_codes(tok.encode(batch))
            loss = ((recon - batch) ** 2).mean()
            opt.zero_grad()
            backward(loss)
            opt.step()
            epoch_loss += loss.item()
            n_batches += 1
        result.train_losses.append(epoch_loss / n_batches)
        result.val_mse.append(
            float(((tok.decode_codes(tok.encode(Tensor(val))).data - val) ** 2).mean())
        )

    _seed_codebook(tok, train, rng.child("codebook"))
    reseed = rng.child("reseed")

    vq_epochs = config.epochs - warmup
    for epoch in range(vq_epochs):
        # two-step lr decay settles the codebook/encoder pair
        if epoch == int(0.6 * vq_epochs):
            opt.lr = config.lr / 2
        elif epoch == int(0.85 * vq_epochs):
            opt.lr = config.lr / 4
        perm = batches.permutation(train.shape[0])
        epoch_loss, n_batches = 0.0, 0
        seen = np.zeros(config.codebook_size, dtype=bool)
        for start in range(0, train.shape[0], config.batch_size):
            batch = Tensor(train[perm[start : start + config.batch_size]])
            recon, e, z, ids = tok.forward(batch)
            loss, _ = tok.vq_loss(batch, recon, e, z)
            opt.zero_grad()
            backward(loss)
            opt.step()
            seen[np.unique(ids)] = True
            epoch_loss += loss.item()
            n_batches += 1
        dead = np.flatnonzero(~seen)
        if dead.size:
            _reseed_dead_codes(tok, train, dead, reseed)
        result.train_losses.append(epoch_loss / n_batches)
        result.val_mse.append(reconstruction_mse(tok, val))

    result.code_usage = code_usage(tok, train)
    return tok, result


def _reseed_dead_codes(
    tok: MotionTokenizer, train: np.ndarray, dead: np.ndarray, rng: RngStream
) -> None:
    """Move unused codebook rows onto current encoder outputs."""
    sample_idx = rng.choice(train.shape[0], size=min(64, train.shape[0]))
    with no_grad():
        e = tok.encode(Tensor(train[sample_idx])).data.reshape(-1, tok.config.code_dim)
    rows = rng.choice(e.shape[0], size=min(dead.size, e.shape[0]))
    tok.codebook.data[dead[: len(rows)]] = e[rows]


def reconstruction_mse(tok: MotionTokenizer, frames: np.ndarray) -> float:
    with no_grad():
        recon, _, _, _ = tok.forward(Tensor(frames))
    return float(((recon.data - frames) ** 2).mean())


def code_usage(tok: MotionTokenizer, frames: np.ndarray) -> float:
    """Fraction of codebook entries hit at least once on ``frames``."""
    used = np.zeros(tok.config.codebook_size, dtype=bool)
    with no_grad():
        for start in range(0, frames.shape[0], 64):
            ids = tok.tokenize(frames[start : start + 64])
            used[np.unique(ids)] = True
    return float(used.mean())


def _seed_codebook(tok: MotionTokenizer, train: np.ndarray, rng: RngStream) -> None:
    sample = train[: min(len(train), 256)]
    with no_grad():
        e = tok.encode(Tensor(sample)).data.reshape(-1, tok.config.code_dim)
    if e.shape[0] >= tok.config.codebook_size:
        centroids, _ = kmeans(e, tok.config.codebook_size, rng, max_iters=10)
        tok.codebook.data = centroids
