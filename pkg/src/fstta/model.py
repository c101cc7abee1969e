"""Toy navigation policy: a shared MLP trunk with two layer norms.

Each candidate (a neighbouring node or STOP) is scored by running
``[instruction, history, candidate]`` through

    dense(24->32) -> LN -> tanh -> dense(32->32) -> LN -> tanh -> dense(32->1)

and soft-maxing the logits across candidates. Test-time adaptation only
touches the layer-norm affine parameters; they are flattened into one
vector ``theta`` in the order ``ln1.gamma, ln1.beta, ln2.gamma, ln2.beta``
(restricted to the last ``n_adapt`` layer norms).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataValidityError, TrainingError

LN_EPS = 1e-5
PARAMS_MAGIC = b"FSTTA-PARAMS"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    instr_dim: int = 8
    hist_dim: int = 8
    cand_dim: int = 8
    hidden: tuple = (32, 32)
    n_adapt: int = 2

    @property
    def in_dim(self):
        return self.instr_dim + self.hist_dim + self.cand_dim

    @property
    def adapt_dim(self):
        return sum(2 * h for h in self.hidden[len(self.hidden) - self.n_adapt:])

    def to_dict(self):
        return {
            "instr_dim": self.instr_dim,
            "hist_dim": self.hist_dim,
            "cand_dim": self.cand_dim,
            "hidden": list(self.hidden),
            "n_adapt": self.n_adapt,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["instr_dim"], d["hist_dim"], d["cand_dim"], tuple(d["hidden"]), d["n_adapt"])


@dataclass
class StepInput:
    instruction: np.ndarray
    candidates: np.ndarray  # (K, cand_dim); the last row is STOP
    history: np.ndarray

    @property
    def k(self):
        return self.candidates.shape[0]

    def features(self):
        c = np.atleast_2d(self.candidates)
        k = c.shape[0]
        if k < 1:
            raise DataValidityError("a step needs at least one candidate (STOP)")
        return np.hstack([
            np.broadcast_to(self.instruction, (k, self.instruction.size)),
            np.broadcast_to(self.history, (k, self.history.size)),
            c,
        ])


@dataclass
class PolicyParams:
    """Dense weights plus one ``(gamma, beta)`` pair per layer norm."""

    arch: Architecture
    weights: list  # [W1, W2, w_out]
    biases: list  # [b1, b2, b_out]
    gammas: list
    betas: list
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, arch=Architecture(), seed=0):
        rng = np.random.default_rng(seed)
        dims = [arch.in_dim, *arch.hidden]
        weights = [rng.normal(0.0, 1.0 / np.sqrt(dims[i]), (dims[i], dims[i + 1])) for i in range(len(arch.hidden))]
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(dims[-1]), dims[-1]))
        biases = [np.zeros(h) for h in arch.hidden] + [np.zeros(1)]
        gammas = [np.ones(h) for h in arch.hidden]
        betas = [np.zeros(h) for h in arch.hidden]
        return cls(arch, weights, biases, gammas, betas)

    def copy(self):
        return PolicyParams(
            self.arch,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [g.copy() for g in self.gammas],
            [b.copy() for b in self.betas],
            dict(self.meta),
        )

    @property
    def adapt_layers(self):
        n = len(self.arch.hidden)
        return range(n - self.arch.n_adapt, n)

    def adaptable_vector(self):
        return np.concatenate([np.concatenate([self.gammas[i], self.betas[i]]) for i in self.adapt_layers])

    def with_adaptable(self, theta):
        """Copy whose layer-norm affine parameters are taken from ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.arch.adapt_dim,):
            raise DataValidityError(f"theta must have length {self.arch.adapt_dim}, got {theta.shape}")
        out = PolicyParams(self.arch, self.weights, self.biases, list(self.gammas), list(self.betas), self.meta)
        pos = 0
        for i in self.adapt_layers:
            h = self.arch.hidden[i]
            out.gammas[i] = theta[pos:pos + h]
            out.betas[i] = theta[pos + h:pos + 2 * h]
            pos += 2 * h
        return out

    def named_arrays(self):
        out = []
        for i, w in enumerate(self.weights):
            out.append((f"dense{i}.weight", w))
            out.append((f"dense{i}.bias", self.biases[i]))
        for i in range(len(self.gammas)):
            out.append((f"ln{i}.gamma", self.gammas[i]))
            out.append((f"ln{i}.beta", self.betas[i]))
        return out


def _layer_norm(z):
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_backward(dn, n, inv):
    # d/dz of n = (z - mean) / std, for each row independently
    h = n.shape[-1]
    return inv / h * (h * dn - dn.sum(axis=-1, keepdims=True) - n * (dn * n).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, x):
    """Logits for feature rows ``x`` of shape ``(..., in_dim)`` plus a backprop cache."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.arch.in_dim:
        raise DataValidityError(f"feature width {x.shape[-1]} != architecture input {params.arch.in_dim}")
    cache = {"x": x, "layers": []}
    h = x
    for i in range(len(params.arch.hidden)):
        z = h @ params.weights[i] + params.biases[i]
        n, inv = _layer_norm(z)
        a = np.tanh(params.gammas[i] * n + params.betas[i])
        cache["layers"].append((h, n, inv, a))
        h = a
    logits = h @ params.weights[-1] + params.biases[-1][0]
    return logits, cache


def backward(params: PolicyParams, cache, dlogits, adaptable_only=False):
    """Gradients of a scalar loss given ``dloss/dlogits``.

    Returns the flattened adaptable gradient when ``adaptable_only`` is set,
    else a dict of full parameter gradients keyed like ``named_arrays``.
    """
    dlogits = np.asarray(dlogits, dtype=np.float64)
    grads = {}
    out = len(params.arch.hidden)
    last = cache["layers"][-1][3]
    lead = tuple(range(dlogits.ndim))
    grads[f"dense{out}.weight"] = np.tensordot(dlogits, last, axes=(lead, lead))
    grads[f"dense{out}.bias"] = np.array([dlogits.sum()])
    dh = dlogits[..., None] * params.weights[-1]
    stop = min(params.adapt_layers) if adaptable_only else 0
    for i in reversed(range(len(params.arch.hidden))):
        h_in, n, inv, a = cache["layers"][i]
        da = dh * (1.0 - a * a)
        grads[f"ln{i}.gamma"] = (da * n).reshape(-1, n.shape[-1]).sum(axis=0)
        grads[f"ln{i}.beta"] = da.reshape(-1, n.shape[-1]).sum(axis=0)
        if i == stop and adaptable_only:
            break
        dz = _layer_norm_backward(da * params.gammas[i], n, inv)
        grads[f"dense{i}.weight"] = h_in.reshape(-1, h_in.shape[-1]).T @ dz.reshape(-1, dz.shape[-1])
        grads[f"dense{i}.bias"] = dz.reshape(-1, dz.shape[-1]).sum(axis=0)
        if i > 0:
            dh = dz @ params.weights[i].T
    if adaptable_only:
        return np.concatenate([np.concatenate([grads[f"ln{i}.gamma"], grads[f"ln{i}.beta"]]) for i in params.adapt_layers])
    return grads


def softmax(logits, mask=None):
    z = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy_loss(probs):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(-(p * logp).sum())


def entropy_logit_grad(probs):
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    ent = -(p * logp).sum(axis=-1, keepdims=True)
    return -p * (logp + ent)


def score_actions(params: PolicyParams, step: StepInput, theta=None):
    """Probabilities over the step's candidates (STOP last)."""
    if theta is not None:
        params = params.with_adaptable(theta)
    logits, _ = forward(params, step.features())
    return softmax(logits)


def backward_adaptable(params: PolicyParams, step: StepInput, theta=None):
    """``(probs, entropy, d entropy / d theta)`` for one step."""
    if theta is not None:
        params = params.with_adaptable(theta)
    logits, cache = forward(params, step.features())
    probs = softmax(logits)
    grad = backward(params, cache, entropy_logit_grad(probs), adaptable_only=True)
    return probs, entropy_loss(probs), grad


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    train_episodes: int = 3000
    heldout_episodes: int = 300
    target_accuracy: float = 0.85
    init_seed: int = 0


def _pad_steps(steps):
    kmax = max(s.k for s, _ in steps)
    width = steps[0][0].features().shape[1]
    x = np.zeros((len(steps), kmax, width))
    mask = np.zeros((len(steps), kmax), dtype=bool)
    labels = np.zeros(len(steps), dtype=np.int64)
    for i, (s, y) in enumerate(steps):
        x[i, :s.k] = s.features()
        mask[i, :s.k] = True
        labels[i] = y
    return x, mask, labels


def step_accuracy(params, steps):
    if not steps:
        return float("nan")
    x, mask, labels = _pad_steps(steps)
    logits, _ = forward(params, x)
    pred = np.argmax(np.where(mask, logits, -np.inf), axis=1)
    return float(np.mean(pred == labels))


def pretrain(sampler, cfg: TrainConfig = TrainConfig(), seed=0, arch=Architecture()):
    """Supervised cross-entropy training on teacher actions with Adam.

    ``sampler(rng, n_episodes)`` returns a list of ``(StepInput, label)``
    teacher-forced steps. Raises ``TrainingError`` when held-out accuracy
    stays below ``cfg.target_accuracy``.
    """
    rng = np.random.default_rng(seed)
    train = sampler(rng, cfg.train_episodes)
    heldout = sampler(rng, cfg.heldout_episodes)
    params = PolicyParams.init(arch, seed=cfg.init_seed + 1000 * seed)
    x, mask, labels = _pad_steps(train)
    names = [n for n, _ in params.named_arrays()]
    arrays = dict(params.named_arrays())
    m1 = {n: np.zeros_like(a) for n, a in arrays.items()}
    m2 = {n: np.zeros_like(a) for n, a in arrays.items()}
    t = 0
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            logits, cache = forward(params, x[idx])
            probs = softmax(logits, mask[idx])
            dlog = probs.copy()
            dlog[np.arange(len(idx)), labels[idx]] -= 1.0
            dlog /= len(idx)
            g = backward(params, cache, dlog)
            t += 1
            for n in names:
                m1[n] = cfg.beta1 * m1[n] + (1 - cfg.beta1) * g[n]
                m2[n] = cfg.beta2 * m2[n] + (1 - cfg.beta2) * g[n] ** 2
                mh = m1[n] / (1 - cfg.beta1 ** t)
                vh = m2[n] / (1 - cfg.beta2 ** t)
                arrays[n] -= cfg.lr * mh / (np.sqrt(vh) + 1e-8)
        if epoch % 10 == 9 or epoch == cfg.epochs - 1:
            history.append((epoch + 1, step_accuracy(params, train), step_accuracy(params, heldout)))
    acc = step_accuracy(params, heldout)
    params.meta = {
        "seed": seed,
        "heldout_accuracy": acc,
        "train_accuracy": step_accuracy(params, train),
        "train_steps": len(train),
        "heldout_steps": len(heldout),
        "epochs": cfg.epochs,
        "history": history,
    }
    if cfg.epochs > 0 and acc < cfg.target_accuracy:
        raise TrainingError(
            f"held-out step accuracy {acc:.3f} below target {cfg.target_accuracy}", params.meta
        )
    return params


def save_params(params: PolicyParams, path):
    """Write ``params`` in the flat container format described in the README.

    Layout: the magic ``FSTTA-PARAMS``, a little-endian uint32 format
    version, a uint32 header length, a UTF-8 JSON header (architecture,
    metadata, and ``[name, shape]`` per array), then every array as raw
    little-endian float64 in header order.
    """
    arrays = params.named_arrays()
    header = json.dumps({
        "arch": params.arch.to_dict(),
        "meta": params.meta,
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<II", PARAMS_VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_params(path) -> PolicyParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(PARAMS_MAGIC):
        raise DataValidityError(f"{path} is not a parameter file")
    pos = len(PARAMS_MAGIC)
    version, hlen = struct.unpack_from("<II", blob, pos)
    if version != PARAMS_VERSION:
        raise DataValidityError(f"unsupported parameter file version {version}, expected {PARAMS_VERSION}")
    pos += 8
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arch = Architecture.from_dict(header["arch"])
    loaded = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        loaded[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise DataValidityError(f"{path} has {len(blob) - pos} trailing bytes")
    n_dense = len(arch.hidden) + 1
    return PolicyParams(
        arch,
        [loaded[f"dense{i}.weight"] for i in range(n_dense)],
        [loaded[f"dense{i}.bias"] for i in range(n_dense)],
        [loaded[f"ln{i}.gamma"] for i in range(len(arch.hidden))],
        [loaded[f"ln{i}.beta"] for i in range(len(arch.hidden))],
        header["meta"],
    )
