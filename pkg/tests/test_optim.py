import numpy as np
import pytest

from dfnlab.linalg import singular_value_grad, svd
from dfnlab.model import AdapterSpec, Backbone, CDFSSModel, Navigator, dfn_specs
from dfnlab.optim import SAM, Adam, SamConfig, make_optimizer, sam_perturb, sam_svn_step
from dfnlab.synthbench import EpisodeBatch, get_domain, sample_episode
from dfnlab.tensor import Tensor


def test_adam_first_step_is_lr_times_sign():
    # bias correction makes the first update exactly lr * g / (|g| + eps)
    p = {"x": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    p["x"].grad = np.array([0.5, -3.0])
    Adam(lr=0.1, eps=0.0).step(p)
    assert np.allclose(p["x"].data, [0.9, -1.9])


def test_adam_minimises_quadratic():
    x = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam(lr=0.1)
    for _ in range(500):
        x.grad = 2 * x.data
        opt.step({"x": x})
    assert abs(x.data[0]) < 1e-3


def test_adam_needs_gradients():
    with pytest.raises(ValueError):
        Adam().step({"x": Tensor(np.ones(1), requires_grad=True)})


def test_perturbation_direction_and_norm():
    assert np.allclose(sam_perturb(np.array([3.0, 4.0]), 0.5), [0.3, 0.4])
    assert np.array_equal(sam_perturb(np.zeros(3), 0.5), np.zeros(3))


def test_sam_config_validation():
    with pytest.raises(ValueError):
        SamConfig(-0.1)
    with pytest.raises(ValueError):
        SamConfig(0.1, "everything")


def test_sam_gradient_on_a_quadratic():
    # f = x^T A x / 2: the second pass sees A (x + rho * Ax / |Ax|)
    a = np.array([[3.0, 1.0], [1.0, 2.0]])
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)

    class Quad:
        def __init__(self):
            self.data = 0.5 * x.data @ a @ x.data

        def backward(self):
            x.grad = a @ x.data

    opt = SAM({"x": x}, lr=0.1, config=SamConfig(0.25, "whole-model"))
    opt.step(Quad)
    g = a @ np.array([1.0, -2.0])
    expected = a @ (np.array([1.0, -2.0]) + 0.25 * g / np.linalg.norm(g))
    assert np.allclose(opt.last_grads["x"], expected, atol=1e-14)
    assert np.allclose(opt.last_eps["x"], 0.25 * g / np.linalg.norm(g))


def _double_well(x):
    # sharp well at -1, wide well at +1, equal depth; loss and gradient of the active piece
    sharp, wide = 50.0 * (x + 1) ** 2, (x - 1) ** 2
    return (sharp, 100.0 * (x + 1)) if sharp < wide else (wide, 2.0 * (x - 1))


def _descend(x0, rho, lr=0.02, steps=300):
    x = Tensor(np.array([x0]), requires_grad=True)
    opt = SAM({"x": x}, lr=lr, config=SamConfig(rho, "whole-model"))

    class Loss:
        def __init__(self):
            self.data = _double_well(x.data[0])[0]

        def backward(self):
            x.grad = np.array([_double_well(x.data[0])[1]])

    for _ in range(steps):
        opt.step(Loss)
    return x.data[0]


def test_sam_ends_in_the_flat_basin_more_often():
    inits = np.random.default_rng(0).uniform(-2, 2, 100)

    def in_sharp_basin(x):
        return 50.0 * (x + 1) ** 2 < (x - 1) ** 2

    adam = sum(in_sharp_basin(_descend(x0, 0.0)) for x0 in inits)
    sam = sum(in_sharp_basin(_descend(x0, 0.3)) for x0 in inits)
    assert sam < adam
    assert (adam, sam) == (26, 0)


def test_adam_spec_examples():
    x = Tensor(np.array([1.0]), requires_grad=True)
    x.grad = np.zeros(1)
    Adam(lr=0.1).step({"x": x})
    assert x.data[0] == 1.0
    x.grad = np.ones(1)
    Adam(lr=0.1).step({"x": x})
    assert x.data[0] == pytest.approx(0.9, abs=1e-7)
    y = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam(lr=0.1)
    for _ in range(100):
        y.grad = 2 * y.data
        opt.step({"y": y})
    assert abs(y.data[0]) < 0.1


def test_singular_value_gradient_by_finite_differences():
    # diagonal alpha, U = V = I: dL/dS is the diagonal of dL/dalpha
    target = np.array([[0.5, 0.2], [-0.1, 0.3]])
    s = np.array([0.9, 0.4])

    def loss(sv):
        return np.sum((np.diag(sv) - target) ** 2)

    f = svd(np.diag(s))
    g = singular_value_grad(f, 2 * (np.diag(s) - target))
    h = 1e-6
    fd = np.array([(loss(s + h * e) - loss(s - h * e)) / (2 * h) for e in np.eye(2)])
    assert np.allclose(f.U, np.eye(2)) and np.allclose(f.Vt, np.eye(2))
    assert np.allclose(g, fd, atol=1e-8)
    assert np.allclose(g, np.diag(2 * (np.diag(s) - target)))


def test_svn_step_descends_a_convex_objective():
    nav = Navigator(AdapterSpec(), 4, np.random.default_rng(0))
    star = np.random.default_rng(1).standard_normal((4, 4, 1, 1))
    alpha = nav.alpha
    opt = SAM({"alpha": alpha}, lr=1e-2, config=SamConfig(0.05, "svn"), navigators={"n": nav})

    def loss():
        d = alpha - Tensor(star)
        return (d * d).sum()

    losses = [opt.step(loss) for _ in range(60)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def _model_batch(specs, seed=0):
    model = CDFSSModel(Backbone.random(seed), specs, seed=seed)
    batch = EpisodeBatch.from_episodes([sample_episode(get_domain("source"), 1, s) for s in range(3)])
    return model, model.attach_features(batch)


def test_svn_perturbs_only_singular_values():
    model, batch = _model_batch(dfn_specs())
    opt = make_optimizer(model, 1e-3, SamConfig(0.3, "svn"))
    sam_svn_step(model, batch, opt)
    for eps in opt.last_eps.values():
        assert eps.ndim == 1
        assert np.linalg.norm(eps) == pytest.approx(0.3, abs=1e-12)
    assert opt.steps == 1


def test_svn_rejects_lora_navigators():
    model, _ = _model_batch([AdapterSpec(design="lora")])
    with pytest.raises(ValueError):
        make_optimizer(model, 1e-3, SamConfig(0.3, "svn"))


def test_dfn_only_needs_navigators():
    model, _ = _model_batch([])
    with pytest.raises(ValueError):
        make_optimizer(model, 1e-3, SamConfig(0.3, "dfn-only"))


def test_parameters_restored_after_perturbation():
    model, batch = _model_batch(dfn_specs())
    opt = make_optimizer(model, 0.0, SamConfig(0.5, "whole-model"))
    before = model.state_dict()
    opt.step(lambda: model.loss(batch))
    after = model.state_dict()
    # lr = 0: the step must leave every parameter exactly where it was
    assert all(np.array_equal(before[k], after[k]) for k in before)
