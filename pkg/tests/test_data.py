import numpy as np
import pytest

from diffora.data import export_csv, gen_planted, gen_sphere, ingest_csv, make_split
from diffora.errors import ConfigError, FeasibilityError, ParseError
from diffora.models import init_modular_net
from diffora.numerics import SeededRng, min_eigenvalue
from diffora.pipeline import gd_step


def test_gen_sphere_unit_columns_and_labels():
    ds = gen_sphere(10, 8, 2.0, SeededRng(1))
    norms = np.sqrt(np.sum(ds.x * ds.x, axis=0))
    assert np.max(np.abs(norms - 1.0)) < 1e-10
    assert np.max(np.abs(ds.y)) <= 2.0


def test_gen_sphere_small_pair_not_parallel():
    ds = gen_sphere(2, 2, 1.0, SeededRng(2))
    assert abs(ds.x[:, 0] @ ds.x[:, 1]) < 1.0 - 1e-6


def test_gen_sphere_gram_positive():
    # with n > d the n x n Gram is rank-deficient by construction, so the
    # independence check runs on the d x d feature Gram (columns span R^d)
    ds = gen_sphere(10, 8, 1.0, SeededRng(3))
    assert min_eigenvalue(ds.x @ ds.x.T) > 0.0
    small = gen_sphere(6, 8, 1.0, SeededRng(4))
    assert min_eigenvalue(small.x.T @ small.x) > 0.0


def test_gen_sphere_feasibility_error():
    class DegenerateRng(SeededRng):
        def normal(self, n):
            return np.ones(n)

    with pytest.raises(FeasibilityError):
        gen_sphere(2, 2, 1.0, DegenerateRng(1))


def _planted(seed=4, noise=0.0, layers=1, n=60):
    base = init_modular_net(layers, 8, 4, 16, 1, SeededRng(seed))
    planted = [[2, 3, 5]] * layers
    ds, teacher, mask = gen_planted(layers, 6, planted, noise, n, SeededRng(seed + 1),
                                    dim=8, seq=4, ff_dim=16, out_dim=1, rank=2,
                                    alpha=2.0, teacher_scale=0.6, base=base)
    return base, ds, teacher, mask


def test_gen_planted_noise_free_self_consistency():
    base, ds, teacher, mask = _planted(noise=0.0)
    # a student carrying the teacher's own adapters reaches zero loss
    wiring = {}
    for li, fam, slot in teacher.slots():
        if slot.adapter is not None:
            wiring[(li, fam)] = slot.adapter.copy()
    student = base.with_adapters(wiring)
    preds = student.forward(ds.x, None)
    assert float(np.mean((preds - ds.y) ** 2)) <= 1e-10


def test_gen_planted_calibrated_solo_effects():
    base, ds, teacher, mask = _planted()
    x = ds.x
    base_out = base.forward(x)
    for li, fam, slot in teacher.slots():
        if slot.adapter is None:
            continue
        solo = base.with_adapters({(li, fam): slot.adapter})
        effect = solo.forward(x) - base_out
        # single-pass calibration is linear in b; downstream nonlinearity
        # leaves a small residual mismatch
        assert np.sqrt(np.mean(effect**2)) == pytest.approx(0.6, rel=0.02)


def test_gen_planted_disjoint_selection_fits_worse():
    base, ds, teacher, mask = _planted(noise=0.0, n=200)
    from diffora.dam import DamState, attach_sharing

    losses = {}
    for name, gamma in (("planted", mask), ("complement", 1.0 - mask)):
        dam = DamState(np.zeros(mask.shape), rho=0.5, gamma_bin=gamma)
        net, _ = attach_sharing(dam, base, 1, False, 2, 2.0, SeededRng(9))
        for _ in range(150):
            loss, grads = net.loss_and_grads(ds.x, ds.y, gates=None)
            for ad, da, db in grads.by_adapter.values():
                ad.a = gd_step(ad.a, da, 0.005)
                ad.b = gd_step(ad.b, db, 0.005)
        losses[name] = net.loss(ds.x, ds.y, gates=None)
    assert losses["planted"] < losses["complement"]


def test_gen_planted_identifiability_across_seeds():
    from diffora.dam import DamState, attach_sharing

    planted_losses, complement_losses = [], []
    for seed in range(5):
        base, ds, teacher, mask = _planted(seed=100 + 17 * seed, noise=0.01, n=200)
        for name, gamma, sink in (("p", mask, planted_losses),
                                  ("c", 1.0 - mask, complement_losses)):
            dam = DamState(np.zeros(mask.shape), rho=0.5, gamma_bin=gamma)
            net, _ = attach_sharing(dam, base, 1, False, 2, 2.0, SeededRng(7))
            for _ in range(150):
                loss, grads = net.loss_and_grads(ds.x, ds.y, gates=None)
                for ad, da, db in grads.by_adapter.values():
                    ad.a = gd_step(ad.a, da, 0.005)
                    ad.b = gd_step(ad.b, db, 0.005)
            sink.append(net.loss(ds.x, ds.y, gates=None))
    assert np.mean(planted_losses) < np.mean(complement_losses)


def test_gen_planted_matches_paper_operating_point():
    base, ds, teacher, mask = _planted()
    assert np.array_equal(mask.sum(axis=1), np.full(mask.shape[0], 3.0))


def test_gen_planted_rejects_empty_and_mismatched_sets():
    base = init_modular_net(2, 8, 4, 16, 1, SeededRng(5))
    with pytest.raises(ConfigError):
        gen_planted(2, 6, [[1], []], 0.0, 10, SeededRng(6), base=base)
    with pytest.raises(ConfigError):
        gen_planted(2, 6, [[1, 2], [3]], 0.0, 10, SeededRng(6), base=base)


def test_ingest_csv_basic(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("f1,f2,y\n1.0,2.0,3.0\n4.0,5.0,6.0\n7.0,8.0,9.0\n")
    ds = ingest_csv(str(p), "y")
    assert ds.d == 2 and ds.n == 3
    assert np.array_equal(ds.y.ravel(), [3.0, 6.0, 9.0])
    assert np.array_equal(ds.x[:, 0], [1.0, 2.0])


def test_ingest_csv_reports_offending_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f1,f2,y\n1.0,oops,3.0\n")
    with pytest.raises(ParseError) as err:
        ingest_csv(str(p), "y")
    assert err.value.line == 2
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("f1,f2,y\n1.0,2.0,3.0\n1.0,2.0\n")
    with pytest.raises(ParseError) as err:
        ingest_csv(str(ragged), "y")
    assert err.value.line == 3
    with pytest.raises(ParseError):
        ingest_csv(str(p), "missing")


def test_csv_round_trip_is_bitwise(tmp_path):
    ds = gen_sphere(6, 4, 1.0, SeededRng(8))
    path = tmp_path / "sphere.csv"
    export_csv(ds, str(path))
    back = ingest_csv(str(path), "y")
    assert np.array_equal(back.x, ds.x)
    assert np.array_equal(back.y, ds.y)
    assert path.read_text().startswith("#")


def test_ingest_csv_normalize_flag(tmp_path):
    p = tmp_path / "n.csv"
    p.write_text("f1,f2,y\n3.0,4.0,1.0\n0.0,2.0,0.5\n")
    ds = ingest_csv(str(p), "y", normalize=True)
    norms = np.sqrt(np.sum(ds.x * ds.x, axis=0))
    assert np.allclose(norms, 1.0)


def test_make_split_examples():
    plan = make_split(10, 0.5, SeededRng(9))
    assert len(plan.train_idx) == 5 and len(plan.valid_idx) == 5
    assert set(plan.train_idx) | set(plan.valid_idx) == set(range(10))
    assert not set(plan.train_idx) & set(plan.valid_idx)
    again = make_split(10, 0.5, SeededRng(9))
    assert np.array_equal(plan.train_idx, again.train_idx)
    odd = make_split(7, 0.5, SeededRng(10))
    assert len(odd.train_idx) == 3 and len(odd.valid_idx) == 4
    with pytest.raises(ConfigError):
        make_split(3, 0.1, SeededRng(11))
