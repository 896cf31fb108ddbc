"""Synergy decoder p(a|z), multi-head latent policy pi(z|s,n) and discriminator q(z|a)."""
import hashlib
import logging
import math

import numpy as np

import diffnet as dn
from diffnet import DiagGaussian, MlpSpec, ParamSet
from errors import ConfigurationError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

DECODER_FORMS = ("linear", "mlp")
DISC_RETRIES = 3


def _check_dim(x, dim, what):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ConfigurationError(f"{what}: expected dim {dim}, got {x.shape[-1]}")
    return x


class SynergyModel:
    """Shared decoder from latent actions z (dim b) to joint actions a (dim d)"""

    def __init__(self, form, b, d, params, spec=None, frozen=False):
        if form not in DECODER_FORMS:
            raise ConfigurationError(f"Unknown decoder form: {form}")
        if not 1 <= b <= d:
            raise ConfigurationError(f"Latent dim b={b} must be in [1, d={d}]")
        self.form = form
        self.b = b
        self.d = d
        self.params = params
        self.spec = spec
        self.frozen = frozen

    @classmethod
    def create(cls, form, b, d, rng, hidden=(32, 32), activation="tanh"):
        if b >= d:
            raise ConfigurationError(f"A learned synergy space needs b < d (b={b}, d={d})")
        params = ParamSet()
        spec = None
        if form == "linear":
            limit = math.sqrt(6.0 / (b + d))
            params.add("decoder.phi", rng.uniform(-limit, limit, size=(b, d)))
        elif form == "mlp":
            spec = MlpSpec((b,) + tuple(hidden) + (d,), activation)
            dn.init_mlp(params, spec, "decoder", rng)
        else:
            raise ConfigurationError(f"Unknown decoder form: {form}")
        params.add("decoder.log_std", np.full(d, math.log(dn.INIT_STD)))
        logger.info(f"Synergy model created: form={form}, b={b}, d={d}")
        return cls(form, b, d, params, spec)

    @classmethod
    def identity(cls, d):
        """Frozen phi = I decoder (b = d), i.e. plain full-dimensional control"""
        params = ParamSet({"decoder.phi": np.eye(d),
                           "decoder.log_std": np.full(d, math.log(dn.INIT_STD))})
        return cls("linear", d, d, params, frozen=True)

    @classmethod
    def from_linear(cls, components, offset=None, frozen=True):
        components = np.asarray(components, dtype=np.float64)
        b, d = components.shape
        params = ParamSet({"decoder.phi": components})
        if offset is not None:
            params.add("decoder.offset", offset)
        params.add("decoder.log_std", np.full(d, math.log(dn.INIT_STD)))
        return cls("linear", b, d, params, frozen=frozen)

    @classmethod
    def from_mlp(cls, spec, params, prefix, frozen=True):
        """Wrap an MLP stored under ``prefix`` as a decoder"""
        renamed = ParamSet()
        for layer in range(spec.num_layers):
            for src, dst in zip(dn.mlp_param_names(prefix, layer), dn.mlp_param_names("decoder", layer)):
                renamed.add(dst, params[src])
        renamed.add("decoder.log_std", np.full(spec.out_dim, math.log(dn.INIT_STD)))
        return cls("mlp", spec.in_dim, spec.out_dim, renamed, spec, frozen=frozen)

    def mean(self, z):
        z = _check_dim(z, self.b, "decode")
        if self.form == "linear":
            out = z @ self.params["decoder.phi"]
            if "decoder.offset" in self.params:
                out = out + self.params["decoder.offset"]
            return out
        return dn.mlp_forward(self.params, self.spec, z, prefix="decoder")

    def mean_node(self, z):
        if self.form == "linear":
            out = dn.matmul(z, dn.param(self.params, "decoder.phi"))
            if "decoder.offset" in self.params:
                out = dn.add(out, dn.param(self.params, "decoder.offset"))
            return out
        return dn.mlp_node(self.params, self.spec, z, prefix="decoder")

    def log_std(self):
        return np.clip(self.params["decoder.log_std"], dn.LOG_STD_MIN, dn.LOG_STD_MAX)

    def log_std_node(self):
        return dn.clamp_log_std(dn.param(self.params, "decoder.log_std"))

    def entropy(self):
        return float(dn.diag_gaussian_entropy(self.log_std()))

    def decode(self, z, mode="stochastic"):
        a_mean = self.mean(z)
        if mode == "deterministic":
            return a_mean
        return DiagGaussian(a_mean, np.exp(self.log_std()))

    def trainable_names(self):
        if self.frozen:
            return []
        return [n for n in self.params.names() if n != "decoder.offset"]

    def clamp(self):
        self.params.clamp("decoder.log_std", dn.LOG_STD_MIN, dn.LOG_STD_MAX)

    def rowspace(self):
        """Orthonormal basis (d x r columns) of the rows of phi"""
        if self.form != "linear":
            raise ConfigurationError("Row space is only defined for linear decoders")
        _, s, vt = np.linalg.svd(self.params["decoder.phi"], full_matrices=False)
        return vt[s > 1e-10 * max(s.max(), 1e-300)].T.copy()

    def meta(self):
        meta = {"kind": "synergy", "form": self.form, "b": self.b, "d": self.d, "frozen": self.frozen}
        if self.spec is not None:
            meta["spec"] = self.spec.to_dict()
            meta["spec_hash"] = dn.spec_hash(self.spec.to_dict())
        return meta

    def to_bytes(self):
        return dn.checkpoint_bytes(self.params, self.meta())

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path):
        return dn.save_checkpoint(path, self.params, self.meta())

    def frozen_copy(self):
        return SynergyModel(self.form, self.b, self.d, self.params.copy(), self.spec, frozen=True)

    @classmethod
    def load(cls, path):
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "synergy":
            raise ConfigurationError(f"{path} is not a synergy checkpoint")
        spec = MlpSpec.from_dict(meta["spec"]) if meta.get("spec") else None
        return cls(meta["form"], int(meta["b"]), int(meta["d"]), params, spec, bool(meta.get("frozen", False)))


class TaskPolicy:
    """Multi-head Gaussian latent policy; head n maps task-n observations to (mu_z, log_std_z)"""

    def __init__(self, obs_dims, b, hidden=(64, 64), activation="tanh", single_head=False,
                 rng=None, params=None):
        self.obs_dims = [int(o) for o in obs_dims]
        self.num_tasks = len(self.obs_dims)
        self.b = b
        self.hidden = tuple(hidden)
        self.activation = activation
        self.single_head = single_head
        if single_head:
            in_dims = [max(self.obs_dims) + self.num_tasks]
        else:
            in_dims = list(self.obs_dims)
        self.pi_specs = [MlpSpec((i,) + self.hidden + (2 * b,), activation) for i in in_dims]
        self.v_specs = [MlpSpec((i,) + self.hidden + (1,), activation) for i in in_dims]
        if params is None:
            params = ParamSet()
            for h, (pi_spec, v_spec) in enumerate(zip(self.pi_specs, self.v_specs)):
                dn.init_mlp(params, pi_spec, f"head{h}.pi", rng)
                last_bias = dn.mlp_param_names(f"head{h}.pi", pi_spec.num_layers - 1)[1]
                params[last_bias][b:] = math.log(dn.INIT_STD)
                dn.init_mlp(params, v_spec, f"head{h}.v", rng)
        self.params = params

    @property
    def num_heads(self):
        return len(self.pi_specs)

    def head_index(self, n):
        if not 0 <= n < self.num_tasks:
            raise ConfigurationError(f"Unknown task id {n} (policy has {self.num_tasks} tasks)")
        return 0 if self.single_head else n

    def head_names(self, n):
        h = self.head_index(n)
        return [name for name in self.params.names() if name.startswith(f"head{h}.")]

    def head_input(self, n, obs):
        obs = _check_dim(obs, self.obs_dims[n], f"task {n} observation")
        if not self.single_head:
            return obs
        width = max(self.obs_dims)
        batch = obs.shape[:-1]
        padded = np.zeros(batch + (width,))
        padded[..., :obs.shape[-1]] = obs
        onehot = np.zeros(batch + (self.num_tasks,))
        onehot[..., n] = 1.0
        return np.concatenate([padded, onehot], axis=-1)

    def distribution(self, n, obs):
        """Numeric (mu_z, clamped log_std_z)"""
        h = self.head_index(n)
        out = dn.mlp_forward(self.params, self.pi_specs[h], self.head_input(n, obs), prefix=f"head{h}.pi")
        return out[..., :self.b], np.clip(out[..., self.b:], dn.LOG_STD_MIN, dn.LOG_STD_MAX)

    def distribution_nodes(self, n, obs):
        h = self.head_index(n)
        out = dn.mlp_node(self.params, self.pi_specs[h], dn.const(self.head_input(n, obs)), prefix=f"head{h}.pi")
        return dn.columns(out, 0, self.b), dn.clamp_log_std(dn.columns(out, self.b, 2 * self.b))

    def value(self, n, obs):
        h = self.head_index(n)
        out = dn.mlp_forward(self.params, self.v_specs[h], self.head_input(n, obs), prefix=f"head{h}.v")
        return out[..., 0]

    def value_node(self, n, obs):
        h = self.head_index(n)
        out = dn.mlp_node(self.params, self.v_specs[h], dn.const(self.head_input(n, obs)), prefix=f"head{h}.v")
        return dn.reduce_sum(out, axis=-1)

    def meta(self):
        return {"kind": "policy", "obs_dims": self.obs_dims, "b": self.b, "hidden": list(self.hidden),
                "activation": self.activation, "single_head": self.single_head,
                "spec_hash": dn.spec_hash([s.to_dict() for s in self.pi_specs + self.v_specs])}

    def save(self, path):
        return dn.save_checkpoint(path, self.params, self.meta())

    @classmethod
    def load(cls, path):
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "policy":
            raise ConfigurationError(f"{path} is not a policy checkpoint")
        return cls(meta["obs_dims"], int(meta["b"]), tuple(meta["hidden"]), meta["activation"],
                   bool(meta["single_head"]), params=params)


class Discriminator:
    """Gaussian regressor q(z|a) with a global log-std vector"""

    def __init__(self, d, b, hidden=(64, 64), activation="tanh", rng=None, params=None):
        self.d = d
        self.b = b
        self.spec = MlpSpec((d,) + tuple(hidden) + (b,), activation)
        if params is None:
            params = ParamSet()
            dn.init_mlp(params, self.spec, "disc", rng)
            params.add("disc.log_std", np.full(b, math.log(dn.INIT_STD)))
        self.params = params
        self.optimizer = dn.Adam(1e-3)

    def log_std(self):
        return np.clip(self.params["disc.log_std"], dn.LOG_STD_MIN, dn.LOG_STD_MAX)

    def logprob(self, a, z):
        a = _check_dim(a, self.d, "discriminator action")
        z = _check_dim(z, self.b, "discriminator latent")
        mean = dn.mlp_forward(self.params, self.spec, a, prefix="disc")
        return dn.diag_gaussian_logprob(mean, self.log_std(), z)

    def logprob_node(self, a, z):
        mean = dn.mlp_node(self.params, self.spec, dn.const(a), prefix="disc")
        log_std = dn.clamp_log_std(dn.param(self.params, "disc.log_std"))
        return dn.gaussian_logprob_node(mean, log_std, dn.const(z))

    def nll(self, a, z):
        return float(-np.mean(self.logprob(a, z)))

    def meta(self):
        return {"kind": "discriminator", "d": self.d, "b": self.b, "spec": self.spec.to_dict(),
                "spec_hash": dn.spec_hash(self.spec.to_dict())}

    def save(self, path):
        return dn.save_checkpoint(path, self.params, self.meta())

    @classmethod
    def load(cls, path):
        params, meta = dn.load_checkpoint(path)
        if meta.get("kind") != "discriminator":
            raise ConfigurationError(f"{path} is not a discriminator checkpoint")
        spec = MlpSpec.from_dict(meta["spec"])
        return cls(int(meta["d"]), int(meta["b"]), spec.layer_widths[1:-1], spec.activation, params=params)


# ------------------------------------------------------------- operations

def decode(model, z, mode="stochastic"):
    return model.decode(z, mode)


def sample_latent(policy, s, n, mode="stochastic", rng=None):
    """Returns (z, log pi(z|s,n), entropy of pi(.|s,n))"""
    mu, log_std = policy.distribution(n, s)
    if mode == "deterministic":
        z = mu
    else:
        z = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    logp = dn.diag_gaussian_logprob(mu, log_std, z)
    return z, logp, dn.diag_gaussian_entropy(log_std)


def act(policy, model, s, n, mode="stochastic", rng=None, decoder_mode=None):
    """Compose pi_task and p: returns (a, z, log pi(z), H(pi_z), H(p_a))

    ``model=None`` means no decoder: the latent sample is the action.
    """
    decoder_mode = mode if decoder_mode is None else decoder_mode
    z, logp, h_z = sample_latent(policy, s, n, mode, rng)
    if model is None:
        return z, z, logp, h_z, 0.0
    if model.b != policy.b:
        raise ConfigurationError(f"Policy latent dim {policy.b} does not match decoder b={model.b}")
    if decoder_mode == "deterministic":
        a = model.mean(z)
    else:
        a = model.decode(z, "stochastic").sample(rng)
    return a, z, logp, h_z, model.entropy()


def disc_logprob(disc, a, z):
    return disc.logprob(a, z)


def disc_update(disc, z, a, lr, epochs):
    """Full-batch Adam steps on the discriminator NLL.

    A step that raises the batch NLL is undone and retried with half the
    learning rate, at most DISC_RETRIES times; then the epoch is skipped.
    Returns (nll_before, nll_after).
    """
    z = np.asarray(z, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if len(z) == 0 or len(z) != len(a):
        raise ConfigurationError(f"Discriminator batch must be non-empty and paired ({len(z)} vs {len(a)})")
    before = disc.nll(a, z)
    current = before

    def loss_fn(params):
        return dn.scale(dn.reduce_mean(disc.logprob_node(a, z)), -1.0)

    for epoch in range(epochs):
        _, grads = dn.value_and_grad(loss_fn, disc.params)
        snapshot = disc.params.copy()
        opt_state = disc.optimizer.state()
        step_lr = lr
        for attempt in range(DISC_RETRIES + 1):
            disc.optimizer.step(disc.params, grads, lr=step_lr)
            disc.params.clamp("disc.log_std", dn.LOG_STD_MIN, dn.LOG_STD_MAX)
            new = disc.nll(a, z)
            if new <= current:
                current = new
                break
            for name, value in snapshot.items():
                disc.params.set(name, value)
            disc.optimizer.restore(opt_state)
            step_lr /= 2.0
        else:
            logger.warning(f"Discriminator epoch {epoch}: step rejected after {DISC_RETRIES} retries")
    return before, current
