import numpy as np
import pytest

from spul import autodiff as ad
from spul import baselines as bl
from spul.baselines import BaselineConfig, run_baseline, run_ga, run_ga_gd, run_ga_kl, run_rl, save_baseline, search_lr
from spul.data import UnlearnSplit
from spul.lm import TinyLM, cross_entropy_on
from spul.prompt_unlearn import assign_generic


def small(split, nf=16, nr=32):
    return UnlearnSplit(split.train_forget[:nf], split.train_retain[:nr], split.test_forget, split.test_retain)


def test_method_names_are_normalised():
    assert BaselineConfig("GA+GD").method == "ga-gd"
    assert BaselineConfig("ga_kl").method == "ga-kl"
    with pytest.raises(ValueError, match="unknown baseline"):
        BaselineConfig("npo")
    with pytest.raises(ValueError):
        BaselineConfig("ga", lr=0)


@pytest.mark.parametrize("method", bl.METHODS)
def test_input_model_is_never_modified(tiny_model, tiny_split, method):
    fp = tiny_model.fingerprint()
    trained, log = run_baseline(tiny_model, small(tiny_split), BaselineConfig(method, lr=1e-3))
    assert tiny_model.fingerprint() == fp
    assert trained.fingerprint() != fp
    assert trained.frozen and log.steps


def test_one_ascent_step_raises_forget_loss(tiny_model, tiny_split):
    forget = tiny_split.train_forget[:16]
    before = cross_entropy_on(tiny_model, tiny_model.encode(forget))
    trained, log = run_ga(tiny_model, forget, BaselineConfig("ga", lr=1e-3, batch_size=16))
    assert len(log.steps) == 1
    assert log.steps[0]["forget"] == pytest.approx(-before, rel=1e-10)
    assert cross_entropy_on(trained, trained.encode(forget)) > before


def test_relabeling_moves_forget_set_toward_generic_labels(tiny_model, tiny_split):
    forget = tiny_split.train_forget[:16]
    assignment = assign_generic(forget, tiny_model.vocab.generic_labels)
    targets = assignment.targets(forget, tiny_model.vocab)

    def generic_ce(model):
        with ad.no_grad():
            return ad.cross_entropy(model.label_logits(model.encode(forget).ids), targets).item()

    trained, _ = run_rl(tiny_model, forget, BaselineConfig("rl", lr=3e-3, batch_size=8), assignment)
    assert generic_ce(trained) < generic_ce(tiny_model)


def test_kl_term_starts_at_exactly_zero(tiny_model, tiny_split):
    _, log = run_ga_kl(tiny_model, small(tiny_split), BaselineConfig("ga-kl", lr=1e-3, batch_size=4))
    assert log.steps[0]["retain"] == 0.0
    assert log.steps[-1]["retain"] > 0.0


def test_gd_term_is_retain_cross_entropy(tiny_model, tiny_split):
    split = small(tiny_split, nf=8, nr=8)
    _, log = run_ga_gd(tiny_model, split, BaselineConfig("ga-gd", lr=1e-3, batch_size=8))
    expected = cross_entropy_on(tiny_model, tiny_model.encode(split.train_retain))
    assert log.steps[0]["retain"] == pytest.approx(expected, rel=1e-10)
    assert log.steps[0]["total"] == pytest.approx(log.steps[0]["forget"] + expected, rel=1e-10)


def test_empty_forget_set_reduces_to_retain_descent(tiny_model, tiny_split):
    split = UnlearnSplit([], tiny_split.train_retain[:32], tiny_split.test_forget, tiny_split.test_retain)
    retain = tiny_model.encode(split.train_retain)
    trained, log = run_ga_gd(tiny_model, split, BaselineConfig("ga-gd", lr=1e-3, batch_size=8, epochs=2))
    assert len(log.steps) == 8 and all(s["forget"] == 0.0 for s in log.steps)
    assert cross_entropy_on(trained, retain) < cross_entropy_on(tiny_model, retain)


def test_empty_retain_set_reduces_to_plain_ascent(tiny_model, tiny_split):
    split = UnlearnSplit(tiny_split.train_forget[:16], [], tiny_split.test_forget, tiny_split.test_retain)
    a, _ = run_ga_kl(tiny_model, split, BaselineConfig("ga-kl", lr=1e-3))
    b, _ = run_ga(tiny_model, split.train_forget, BaselineConfig("ga", lr=1e-3))
    assert a.fingerprint() == b.fingerprint()


def test_runs_are_deterministic(tiny_model, tiny_split):
    a, _ = run_ga_gd(tiny_model, small(tiny_split), BaselineConfig("ga-gd", lr=1e-3))
    b, _ = run_ga_gd(tiny_model, small(tiny_split), BaselineConfig("ga-gd", lr=1e-3))
    assert a.fingerprint() == b.fingerprint()


def test_search_picks_the_widest_retain_forget_gap(tiny_model, tiny_split):
    best, cells = search_lr(tiny_model, small(tiny_split), BaselineConfig("ga"), [1e-4, 1e-3, 1e-2])
    assert [c.lr for c in cells] == [1e-4, 1e-3, 1e-2]
    assert best.gap == max(c.gap for c in cells)
    assert best.report.trainable_params == tiny_model.n_params()


def test_non_finite_loss_stops_early_with_last_good_weights(tiny_model, tiny_split, monkeypatch):
    calls = {"n": 0}
    real = bl._ascent

    def flaky(model, enc, idx):
        calls["n"] += 1
        out = real(model, enc, idx)
        if calls["n"] == 2:
            out.data = np.asarray(np.inf)
        return out

    monkeypatch.setattr(bl, "_ascent", flaky)
    with pytest.warns(RuntimeWarning, match="non-finite"):
        trained, log = run_ga(tiny_model, tiny_split.train_forget[:16], BaselineConfig("ga", lr=1e-3, batch_size=8))
    assert log.stopped_early and len(log.steps) == 1
    assert np.all(np.isfinite(trained.params["head.w"].data))


def test_saved_baseline_records_its_method(tiny_model, tmp_path):
    save_baseline(tiny_model, tmp_path / "m.ckpt", BaselineConfig("ga-gd", lr=3e-4))
    meta = TinyLM.load(tmp_path / "m.ckpt").meta
    assert meta["method"] == "ga-gd" and meta["baseline"]["lr"] == 3e-4


def test_relabeling_with_one_generic_label_is_relabel_all(tiny_model, tiny_split):
    forget = tiny_split.train_forget[:16]
    only = assign_generic(forget, ["none"])
    assert set(only.labels.values()) == {"none"}
    a, _ = run_rl(tiny_model, forget, BaselineConfig("rl", lr=1e-3), only)
    b, _ = run_rl(tiny_model, forget, BaselineConfig("rl", lr=1e-3),
                  type(only)({e.id: "none" for e in forget}))
    assert a.fingerprint() == b.fingerprint()


def test_relabeling_loss_falls_over_epochs(tiny_model, tiny_split):
    _, log = run_rl(tiny_model, tiny_split.train_forget[:16], BaselineConfig("rl", lr=3e-3, batch_size=16, epochs=4))
    losses = [s["forget"] for s in log.steps]
    assert losses[-1] < losses[0]
