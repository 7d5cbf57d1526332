import numpy as np
import pytest

from lat2seq import autodiff as ad
from lat2seq.autodiff import Graph, ParamStore, ShapeError


def numeric_grad(f, x, h=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gf[k] = (fp - fm) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, positive=False):
    """FD check of d(sum(w * build(*inputs)))/d(inputs) for a random weight w."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for k, s in enumerate(shapes):
        v = rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s)
        store.add(f"x{k}", v)
    probe = build(*[Graph().constant(store[f"x{k}"]) for k in range(len(shapes))])
    w = rng.normal(size=probe.shape)

    def loss(g):
        xs = [g.param(store, f"x{k}") for k in range(len(shapes))]
        return ad.reduce_sum(ad.mul(build(*xs), g.constant(w)))

    rep = ad.gradient_check(loss, store, max_entries=None)
    assert rep["max_error"] < 1e-6, rep["errors"]


UNARY = {
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "scale": lambda a: ad.scale(a, -1.7),
    "neg": lambda a: -a,
    "softmax": lambda a: ad.softmax(a, axis=-1),
    "softmax0": lambda a: ad.softmax(a, axis=0),
    "log_softmax": lambda a: ad.log_softmax(a, axis=-1),
    "reshape": lambda a: ad.reshape(a, (12,)),
    "reduce_sum0": lambda a: ad.reduce_sum(a, axis=0),
    "slice_last": lambda a: ad.slice_last(a, 1, 3),
    "index": lambda a: ad.index(a, np.array([2, 0, 2])),
    "getitem": lambda a: a[1],
    "split": lambda a: ad.concat(ad.split_last(a, 2)[::-1], axis=-1),
    "segment_log_softmax": lambda a: ad.segment_log_softmax(a, np.array([0, 2])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    check_op(UNARY[name], (3, 4))


def test_log_matches_finite_differences():
    check_op(ad.log, (3, 4), positive=True)


BINARY = {
    "add": (ad.add, (3, 4), (4,)),
    "sub": (ad.sub, (3, 4), (3, 1)),
    "mul": (ad.mul, (3, 4), (3, 4)),
    "mul_broadcast": (ad.mul, (2, 3, 4), (4,)),
    "matmul": (ad.matmul, (3, 4), (4, 5)),
    "matmul_vec": (ad.matmul, (2, 3, 4), (4,)),
    "affine_nobias": (ad.affine, (3, 4), (5, 4)),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), (3, 4), (3, 2)),
    "stack": (lambda a, b: ad.stack([a, b]), (3, 4), (3, 4)),
    "sum_nodes": (lambda a, b: ad.sum_nodes([a, b, a]), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_ops_match_finite_differences(name):
    fn, sa, sb = BINARY[name]
    check_op(fn, sa, sb)


def test_affine_with_bias():
    check_op(ad.affine, (2, 3, 4), (5, 4), (5,))


def test_lookup_gradient_accumulates_repeats():
    ids = np.array([[1, 3], [1, 1]])
    check_op(lambda t: ad.lookup(t, ids), (5, 3))


def test_pick_neg_log_softmax_gradient():
    check_op(lambda a: ad.pick_neg_log_softmax(a, np.array([1, 0, 3])), (3, 4))


def test_softmax_of_zero_is_uniform():
    g = Graph()
    y = ad.softmax(g.constant(np.zeros(5)))
    assert np.array_equal(y.value, np.full(5, 0.2))


def test_pick_neg_log_softmax_uniform():
    g = Graph()
    y = ad.pick_neg_log_softmax(g.constant(np.zeros(7)), 4)
    assert float(y.value) == pytest.approx(np.log(7), abs=1e-15)


def test_softmax_large_logits_stable():
    g = Graph()
    y = ad.softmax(g.constant(np.array([1000.0, 1000.0, -1000.0])))
    assert np.allclose(y.value, [0.5, 0.5, 0.0])


def test_sum_of_parameter_gives_ones():
    store = ParamStore()
    store.add("p", np.arange(4.0))
    g = Graph()
    touched = g.backward(ad.reduce_sum(g.param(store, "p")))
    assert touched == {"p"}
    assert np.array_equal(store.grads["p"], np.ones(4))


def test_fan_out_sums_contributions():
    store = ParamStore()
    store.add("p", np.array([2.0, -1.0]))
    g = Graph()
    p = g.param(store, "p")
    g.backward(ad.reduce_sum(p * p + p))
    assert np.array_equal(store.grads["p"], 2 * store["p"] + 1)


def test_gradients_accumulate_until_zeroed():
    store = ParamStore()
    store.add("p", np.ones(3))
    for _ in range(2):
        g = Graph()
        g.backward(ad.reduce_sum(g.param(store, "p")))
    assert np.array_equal(store.grads["p"], np.full(3, 2.0))
    store.zero_grad()
    assert not store.grads["p"].any()


def test_unreachable_parameter_untouched():
    store = ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    store.grads["b"][...] = 7.0
    g = Graph()
    g.param(store, "b")
    touched = g.backward(ad.reduce_sum(g.param(store, "a")))
    assert touched == {"a"}
    assert np.array_equal(store.grads["b"], [7.0, 7.0])


def test_constants_get_no_gradient():
    store = ParamStore()
    store.add("a", np.ones(2))
    g = Graph()
    c = g.constant(np.array([3.0, 4.0]))
    g.backward(ad.reduce_sum(g.param(store, "a") * c))
    assert c.grad is None
    assert np.array_equal(store.grads["a"], [3.0, 4.0])


def test_nonscalar_loss_rejected():
    g = Graph()
    with pytest.raises(ShapeError):
        g.backward(g.constant(np.ones(3)))


def test_shape_errors_name_the_op():
    g = Graph()
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(g.constant(np.ones((2, 3))), g.constant(np.ones((4, 2))))


def test_log_of_nonpositive_rejected():
    g = Graph()
    with pytest.raises(FloatingPointError):
        ad.log(g.constant(np.array([1.0, 0.0])))


def test_nodes_are_topological():
    store = ParamStore()
    store.add("a", np.ones(3))
    g = Graph()
    a = g.param(store, "a")
    y = ad.reduce_sum(ad.tanh(a * a) + a)
    for node in g.nodes:
        for x in node.inputs:
            if isinstance(x, ad.Tensor):
                assert x.index < node.index
    assert y.index == len(g.nodes) - 1


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = ad.glorot(rng, (30, 20))
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    store = ParamStore()
    store.add("W", rng.normal(size=(3, 4)))
    store.add("s", np.array(0.1 + 0.2))
    opt = {"m:W": rng.normal(size=(3, 4))}
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(path, store, {"hidden": 4}, opt, {"note": "x"})
    back, config, opt2, extra = ad.load_checkpoint(path)
    assert config == {"hidden": 4} and extra == {"note": "x"}
    assert np.array_equal(back["W"], store["W"]) and back["s"].tobytes() == store["s"].tobytes()
    assert np.array_equal(opt2["m:W"], opt["m:W"])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)


def test_relative_error_floor():
    assert ad.relative_error(np.array([0.0]), np.array([1e-9]))[0] < 1e-3
    assert ad.relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)
