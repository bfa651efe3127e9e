import numpy as np
import pytest

from rnnt_ilm import numeric as nm
from rnnt_ilm.model import MiniIlmConfig, RnntConfig, init_mini_ilm, init_rnnt

FD_STEP = 1e-5
FD_TOL = 1e-4


def fd_check(params, loss_fn, names=None, samples=6, seed=0, step=FD_STEP):
    """Largest relative error between the tape gradient and central differences.

    ``loss_fn()`` rebuilds the loss from the current parameter values.  Up to
    ``samples`` entries per parameter are probed; the error of one entry is
    ``|a - n| / max(|a| + |n|, 1e-6)``.
    """
    rng = np.random.default_rng(seed)
    names = list(params) if names is None else list(names)
    loss = loss_fn()
    grads = nm.backward(loss, {k: params[k] for k in names})
    worst = 0.0
    for k in names:
        p = params[k]
        flat = p.value.reshape(-1)
        idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            vals = []
            for sign in (1, -1):
                v = p.value.copy().reshape(-1)
                v[i] = orig + sign * step
                p.value = v.reshape(p.value.shape)
                with nm.no_grad():
                    vals.append(float(loss_fn().value))
            v = p.value.copy().reshape(-1)
            v[i] = orig
            p.value = v.reshape(p.value.shape)
            num = (vals[0] - vals[1]) / (2 * step)
            ana = float(grads[k].reshape(-1)[i])
            worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-6))
    return worst


def tiny_rnnt(vocab_size=3, feat_dim=2, seed=0, scale=1.0, **kw):
    """Very small transducer; ``scale`` stretches the uniform init to get non-trivial outputs."""
    cfg = dict(enc_layers=1, enc_units=3, pred_layers=1, pred_units=3, embed_dim=2, joint_units=4)
    cfg.update(kw)
    m = init_rnnt(RnntConfig(vocab_size, feat_dim, **cfg), seed)
    if scale != 1.0:
        for p in m.params.values():
            p.value = p.value * scale
    return m


def tiny_mini_ilm(model, seed=1, scale=1.0):
    net = init_mini_ilm(MiniIlmConfig(model.vocab_size, model.enc_dim, embed_dim=2, units=3), seed)
    if scale != 1.0:
        for p in net.params.values():
            p.value = p.value * scale
    return net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
