import numpy as np
import pytest

from evuq import data, metrics, trainer
from evuq.autodiff import TrainingError
from evuq.config import TrainConfig
from evuq.models import save_models

TINY = dict(classifier_hidden=(16,), generator_hidden=(8,), critic_hidden=(8,), latent_dim=4, m=32,
            pretrain_epochs=2, max_g_iters=6, min_g_iters=10**6, n_per_class=40)


@pytest.fixture(scope="module")
def tiny_data():
    ds = data.gen_gaussian_mixture(40, 0)
    return data.train_test_split(ds, 0)


def _wenn(cfg, train):
    c = trainer.build_classifier(cfg)
    trainer.pretrain_enn(c, train, cfg)
    g, d = trainer.build_gan(cfg)
    return trainer.train_wenn(c, g, d, train, cfg)


def test_moving_average():
    np.testing.assert_allclose(trainer.moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert trainer.moving_average([1, 2], 3).size == 0


def test_convergence_check():
    assert trainer.convergence_check(np.full(100, 3.0), 50, 0.02)
    assert not trainer.convergence_check(np.linspace(10, 0, 100), 50, 0.02)
    assert not trainer.convergence_check(np.full(99, 3.0), 50, 0.02)
    # relative tolerance scales with the level once it exceeds 1
    x = np.r_[np.full(50, 100.0), np.full(50, 101.0)]
    assert trainer.convergence_check(x, 50, 0.02)
    assert not trainer.convergence_check(np.r_[np.full(50, 0.5), np.full(50, 0.53)], 50, 0.02)


def test_saturating_series_converges():
    t = np.arange(3000)
    series = 0.2 + 5 * np.exp(-t / 200)
    first = next(i for i in range(100, 3000) if trainer.convergence_check(series[:i], 50, 0.02))
    assert first < 3000


def test_zero_epochs_leaves_classifier_unchanged(tiny_data):
    cfg = TrainConfig(**{**TINY, "pretrain_epochs": 0})
    c = trainer.build_classifier(cfg)
    before = c.digest()
    trainer.pretrain_enn(c, tiny_data[0], cfg)
    assert c.digest() == before


def test_pretrain_history(tiny_data):
    cfg = TrainConfig(**{**TINY, "pretrain_epochs": 3})
    hist = []
    trainer.pretrain_enn(trainer.build_classifier(cfg), tiny_data[0], cfg, hist)
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    assert all(0 <= h["train_accuracy"] <= 1 for h in hist)


@pytest.mark.parametrize("n_d, n_e", [(1, 1), (3, 2), (2, 0)])
def test_step_counts(tiny_data, n_d, n_e):
    cfg = TrainConfig(**{**TINY, "n_d": n_d, "n_e": n_e})
    st = _wenn(cfg, tiny_data[0])
    assert len(st.log) == 6
    assert st.log.critic_steps == 6 * n_d
    assert st.log.enn_steps == 6 * n_e
    assert st.log.generator_steps == 6


def test_no_enn_steps_leaves_classifier(tiny_data):
    cfg = TrainConfig(**{**TINY, "n_e": 0})
    c = trainer.build_classifier(cfg)
    trainer.pretrain_enn(c, tiny_data[0], cfg)
    before = c.digest()
    g, d = trainer.build_gan(cfg)
    trainer.train_wenn(c, g, d, tiny_data[0], cfg)
    assert c.digest() == before


@pytest.mark.parametrize("mode", ["combined", "two_step"])
def test_phase_isolation(tiny_data, mode):
    cfg = TrainConfig(**{**TINY, "check_phases": True, "enn_update": mode})
    st = _wenn(cfg, tiny_data[0])
    assert np.all(np.isfinite(st.log.series("enn_loss")))


def test_clip_mode_respects_bound(tiny_data):
    cfg = TrainConfig(**{**TINY, "lipschitz_mode": "clip", "clip_c": 0.05})
    st = _wenn(cfg, tiny_data[0])
    assert max(np.abs(p.data).max() for p in st.critic.params) <= 0.05


def test_convergence_stops_early(tiny_data):
    cfg = TrainConfig(**{**TINY, "max_g_iters": 400, "min_g_iters": 4, "conv_window": 2, "conv_tol": 1e6})
    st = _wenn(cfg, tiny_data[0])
    assert st.log.converged_at == 3 and len(st.log) == 4


def test_reproducible_bytes(tiny_data, tmp_path):
    cfg = TrainConfig(**TINY)
    outs = []
    for run in range(2):
        st = _wenn(cfg, tiny_data[0])
        st.log.write_csv(tmp_path / f"log{run}.csv")
        save_models(tmp_path / f"m{run}.ckpt", {"classifier": st.classifier, "generator": st.generator,
                                                "critic": st.critic},
                    {"classifier": st.opt_classifier, "generator": st.opt_generator, "critic": st.opt_critic})
        outs.append(((tmp_path / f"log{run}.csv").read_bytes(), (tmp_path / f"m{run}.ckpt").read_bytes()))
    assert outs[0] == outs[1]
    header = outs[0][0].split(b"\n")[0].decode()
    assert header == ",".join(trainer.LOG_FIELDS)


def test_divergence_reports_phase(tiny_data):
    cfg = TrainConfig(**TINY)
    c = trainer.build_classifier(cfg)
    c.params[0].data[:] = np.nan
    with pytest.raises(TrainingError) as info:
        trainer.pretrain_enn(c, tiny_data[0], cfg)
    assert info.value.phase == "pretrain" and info.value.iteration == 0


def test_bayes_accuracy_bounds_trained_model():
    # Bayes accuracy E[max_k p(k|x)] by midpoint quadrature of the mixture density
    h = 0.02
    g = np.arange(-14, 14, h) + h / 2
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    dens = np.stack([np.exp(-np.sum((pts - m) ** 2, axis=1) / 8) / (8 * np.pi) for m in data.class_means()])
    bayes = float(np.sum(dens.max(axis=0) / 3) * h * h)
    assert 0.85 < bayes < 0.95

    ds = data.gen_gaussian_mixture(1000, 0)
    tr, te = data.train_test_split(ds, 0)
    cfg = TrainConfig(classifier_hidden=(64, 64), lr=1e-3, pretrain_epochs=15)
    c = trainer.build_classifier(cfg)
    trainer.pretrain_enn(c, tr, cfg)
    acc = metrics.accuracy(c, te)
    assert 0.85 <= acc <= bayes + 3 * np.sqrt(bayes * (1 - bayes) / len(te))


def test_l2_baseline_trains(tiny_data):
    cfg = TrainConfig(**{**TINY, "pretrain_epochs": 20, "lr": 1e-2})
    c = trainer.build_classifier(cfg, head="softmax")
    hist = []
    trainer.train_baseline_softmax(c, tiny_data[0], cfg, hist)
    assert hist[-1]["loss"] < hist[0]["loss"]
