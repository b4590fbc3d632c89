"""Shared builders for the test suite: the differentiable-op table used
by the finite-difference sweeps and a tiny encoder scalar function."""

import numpy as np

from cubevit import tensor as T
from cubevit import vit3d
from cubevit.heads import pool_tokens


def rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def rand_away_from_zero(rng, *shape, lo=0.1, hi=2.0):
    mag = rng.uniform(lo, hi, size=shape)
    sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
    return mag * sign


def scalarize(expr, weights):
    """Project any tensor expression to a scalar with fixed weights."""
    return T.tensor_sum(T.mul(expr, T.Tensor(weights)))


def op_cases(seed=0):
    """(name, f(tensors) -> scalar Tensor, input arrays) for every
    differentiable op in the engine."""
    rng = np.random.default_rng(seed)
    a = rand(rng, 4, 5)
    b = rand(rng, 4, 5)
    pos = rng.uniform(0.5, 2.0, size=(4, 5))
    m1 = rand(rng, 3, 4)
    m2 = rand(rng, 4, 6)
    vec = rand(rng, 7)
    away = rand_away_from_zero(rng, 4, 5)
    w45 = rand(rng, 4, 5)
    w36 = rand(rng, 3, 6)
    w34 = rand(rng, 3, 4)
    w54 = rand(rng, 5, 4)
    w25 = rand(rng, 2, 5)
    w85 = rand(rng, 8, 5)
    w43 = rand(rng, 4, 3)
    w7 = rand(rng, 7)
    w4 = rand(rng, 4)
    gain = rng.uniform(0.5, 1.5, size=5)
    bias = rand(rng, 5)
    idx = np.array([2, 0, 3, 1, 2])
    widx = rand(rng, 5, 5)

    def fixed_rng():
        return np.random.default_rng(1234)

    cases = [
        ("add", lambda t: scalarize(T.add(t[0], t[1]), w45), [a, b]),
        ("sub", lambda t: scalarize(T.sub(t[0], t[1]), w45), [a, b]),
        ("mul", lambda t: scalarize(T.mul(t[0], t[1]), w45), [a, b]),
        ("div", lambda t: scalarize(T.div(t[0], t[1]), w45), [a, pos]),
        ("neg", lambda t: scalarize(T.neg(t[0]), w45), [a]),
        ("pow_const", lambda t: scalarize(T.pow_const(t[0], 3.0), w45), [a]),
        ("exp", lambda t: scalarize(T.exp(t[0]), w45), [a]),
        ("log", lambda t: scalarize(T.log(t[0]), w45), [pos]),
        ("sqrt", lambda t: scalarize(T.sqrt(t[0]), w45), [pos]),
        ("relu", lambda t: scalarize(T.relu(t[0]), w45), [away]),
        ("absolute", lambda t: scalarize(T.absolute(t[0]), w45), [away]),
        ("gelu", lambda t: scalarize(T.gelu(t[0]), w45), [a]),
        ("sum_all", lambda t: T.tensor_sum(t[0]), [a]),
        ("sum_axis", lambda t: scalarize(T.tensor_sum(t[0], axis=1), w4), [a]),
        ("mean_all", lambda t: T.mean(t[0]), [a]),
        ("mean_axis", lambda t: scalarize(T.mean(t[0], axis=0), rand(np.random.default_rng(7), 5)), [a]),
        ("reshape", lambda t: scalarize(T.reshape(t[0], (5, 4)), w54), [a]),
        ("transpose", lambda t: scalarize(T.transpose(t[0]), w54), [a]),
        ("matmul", lambda t: scalarize(T.matmul(t[0], t[1]), w36), [m1, m2]),
        ("take_rows", lambda t: scalarize(T.take_rows(t[0], idx), widx), [a]),
        ("concat_rows", lambda t: scalarize(T.concat_rows([t[0], t[1]]), w85), [a, b]),
        ("slice_cols", lambda t: scalarize(T.slice_cols(t[0], 1, 3), rand(np.random.default_rng(8), 4, 2)), [a]),
        ("concat_cols", lambda t: scalarize(T.concat_cols([t[0], t[1]]), rand(np.random.default_rng(9), 3, 10)), [m1, rand(np.random.default_rng(10), 3, 6)]),
        ("softmax", lambda t: scalarize(T.softmax(t[0], axis=1), w45), [a]),
        ("softmax_axis0", lambda t: scalarize(T.softmax(t[0], axis=0), w45), [a]),
        ("log_softmax", lambda t: scalarize(T.log_softmax(t[0], axis=1), w45), [a]),
        ("layer_norm", lambda t: scalarize(T.layer_norm(t[0], t[1], t[2]), w45), [a, gain, bias]),
        ("dropout", lambda t: scalarize(T.dropout(t[0], 0.4, rng=fixed_rng(), train=True), w45), [a]),
        ("diagonal", lambda t: scalarize(T.diagonal(t[0]), w4), [rand(np.random.default_rng(11), 4, 4)]),
        ("cosine_similarity", lambda t: T.cosine_similarity(t[0], t[1]), [vec, rand(np.random.default_rng(12), 7)]),
        ("l2_normalize_rows", lambda t: scalarize(T.l2_normalize_rows(t[0]), w45), [a + 3.0]),
        ("cosine_matrix", lambda t: scalarize(T.cosine_matrix(t[0], t[1]), rand(np.random.default_rng(16), 3, 5)), [m1 + 2.5, rand(np.random.default_rng(17), 5, 4) + 2.5]),
        ("mlp_chain", lambda t: scalarize(T.matmul(T.gelu(T.matmul(t[0], t[1])), t[2]), w25), [rand(np.random.default_rng(13), 2, 3), rand(np.random.default_rng(14), 3, 4), rand(np.random.default_rng(15), 4, 5)]),
    ]
    return cases


def tiny_encoder_fn(seed=0, depth=2, dim=16, heads=4, volume_extents=(6, 16, 16), cube=(3, 8, 8)):
    """A full composite forward (cube embed -> positions -> encoder ->
    pool -> linear scalar) as a function of a flat array list, for
    finite-difference checks."""
    rng = np.random.default_rng(seed)
    spec = vit3d.CubeSpec(volume=volume_extents, cube=cube)
    cfg = vit3d.ViTConfig(depth=depth, heads=heads, dim=dim, tile=4)
    params = {}
    params["embed/weight"] = T.Tensor(rng.normal(0, 0.05, (spec.cube_voxels, dim)), requires_grad=True)
    params["embed/bias"] = T.Tensor(rng.normal(0, 0.05, (dim,)), requires_grad=True)
    pe = vit3d.init_positional(spec.grid, dim, rng)
    params["pos/planar"] = pe.planar
    params["pos/depth"] = pe.depth
    params.update(vit3d.init_vit_params(cfg, rng, "enc/", std=0.05))
    params["readout"] = T.Tensor(rng.normal(0, 0.05, (dim,)), requires_grad=True)
    volume = rng.uniform(0, 1, size=volume_extents)

    names = sorted(params.keys())
    arrays = [params[n].data.copy() for n in names] + [volume]

    def forward(tensors):
        local = dict(zip(names, tensors))
        vol = tensors[-1]
        tokens = vit3d.cube_embed(vol, spec, local["embed/weight"], local["embed/bias"])
        tokens = vit3d.positional_encode(
            tokens,
            vit3d.PositionalEmbeddings(local["pos/planar"], local["pos/depth"], spec.grid),
        )
        encoded = vit3d.encode(tokens, cfg, local, "enc/")
        pooled = pool_tokens(encoded)
        return T.tensor_sum(T.mul(pooled, local["readout"]))

    return forward, arrays
