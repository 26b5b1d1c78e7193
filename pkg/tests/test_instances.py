import numpy as np
import pytest

from conftest import brute_force_tsp
from nco_scaling.instances import (
    HELD_KARP_MAX_N, KINDS, SizeError, TourError, TsplibError, TspInstance, build_dataset,
    canonical_order, gap, generate, generate_many, held_karp, held_karp_many, instance_gap,
    attach_tsplib_optimum, load_dataset, nearest_neighbor, nn_two_opt, parse_tsplib, save_dataset,
    tour_cost, tsplib_cost, two_opt, write_tours_csv,
)

SQUARE = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])


def test_generate_deterministic_and_in_unit_square():
    a = generate("uniform", 100, 7)
    b = generate("uniform", 100, 7)
    assert np.array_equal(a.coords, b.coords)
    for kind in KINDS:
        for seed in range(10):
            c = generate(kind, 200, seed).coords
            assert c.shape == (200, 2)
            assert c.min() >= 0.0 and c.max() <= 1.0


def test_generate_rejects_small_n_and_bad_kind():
    with pytest.raises(SizeError):
        generate("uniform", 3, 0)
    with pytest.raises(ValueError):
        generate("spiral", 10, 0)


def test_cluster_variance_below_uniform():
    cl = np.mean([generate("cluster", 1000, s).coords.var(axis=0).sum() for s in range(20)])
    un = np.mean([generate("uniform", 1000, s).coords.var(axis=0).sum() for s in range(20)])
    assert cl < un


def test_distributions_differ_from_uniform():
    # implosion pulls points together, explosion leaves a hole: nearest-neighbour spacing shifts
    def mean_nn(kind):
        vals = []
        for s in range(10):
            c = generate(kind, 300, s).coords
            d = np.linalg.norm(c[:, None] - c[None], axis=-1)
            np.fill_diagonal(d, np.inf)
            vals.append(d.min(axis=1).mean())
        return np.mean(vals)

    assert mean_nn("implosion") < mean_nn("uniform")


def test_generate_many_slices_match():
    many = generate_many("cluster", 12, 5, 3)
    assert np.array_equal(many[3].coords, generate("cluster", 12, (3, 3)).coords)


def test_tour_cost_square_and_symmetries(rng):
    assert tour_cost(SQUARE, [0, 1, 2, 3]) == 4.0
    c = rng.random((9, 2))
    order = rng.permutation(9)
    base = tour_cost(c, order)
    assert abs(tour_cost(c, order[::-1]) - base) < 1e-12
    assert abs(tour_cost(c, np.roll(order, 4)) - base) < 1e-12


def test_tour_cost_rejects_non_permutation():
    with pytest.raises(TourError):
        tour_cost(SQUARE, [0, 1, 1, 3])
    with pytest.raises(TourError):
        tour_cost(SQUARE, [0, 1, 2])


def test_gap_values():
    assert gap(4.0, 4.0) == 0.0
    assert abs(gap(4.2, 4.0) - 5.0) < 1e-12
    with pytest.raises(ValueError):
        gap(1.0, 0.0)


def test_held_karp_geometry():
    assert abs(held_karp(TspInstance(SQUARE)).cost - 4.0) < 1e-12
    line = np.column_stack([np.linspace(0.1, 0.9, 7), np.full(7, 0.5)])
    assert abs(held_karp(TspInstance(line[::-1].copy())).cost - 1.6) < 1e-12


@pytest.mark.parametrize("n", [5, 6, 7, 8, 9])
def test_held_karp_equals_brute_force(n):
    insts = generate_many("uniform", n, 50, 1000 + n)
    tours = held_karp_many(insts)
    for inst, tour in zip(insts, tours):
        assert sorted(tour.order) == list(range(n))
        assert tour.order[0] == 0
        assert abs(tour.cost - tour_cost(inst, tour.order)) < 1e-12
        assert abs(tour.cost - brute_force_tsp(inst.coords)) < 1e-9


def test_held_karp_batch_matches_single_and_threads():
    insts = generate_many("cluster", 9, 30, 5)
    single = [held_karp(i) for i in insts]
    batch = held_karp_many(insts, chunk=7)
    threaded = held_karp_many(insts, chunk=7, threads=3)
    for a, b, c in zip(single, batch, threaded):
        assert np.array_equal(a.order, b.order) and np.array_equal(a.order, c.order)
        assert a.cost == b.cost == c.cost


def test_held_karp_size_limit():
    with pytest.raises(SizeError):
        held_karp(generate("uniform", HELD_KARP_MAX_N + 1, 0))


def test_held_karp_at_limit_runs():
    inst = generate("uniform", 13, 1)
    t = held_karp(inst)
    assert t.cost <= nn_two_opt(inst).cost + 1e-12


def test_nn_two_opt_bounds():
    for inst in generate_many("uniform", 10, 20, 9):
        hk = held_karp(inst)
        tour = nn_two_opt(inst, seed=3)
        assert tour.cost >= hk.cost - 1e-12
        assert tour.cost <= tour.meta["nn_cost"] + 1e-12
        assert sorted(tour.order) == list(range(10)) and tour.order[0] == 0
    assert abs(nn_two_opt(TspInstance(SQUARE)).cost - 4.0) < 1e-12


def test_two_opt_reaches_local_optimum(rng):
    c = rng.random((15, 2))
    tour = two_opt(c, rng.permutation(15))
    d = np.linalg.norm(c[:, None] - c[None], axis=-1)
    n = len(tour)
    for i in range(n - 1):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            a, b, cc, dd = tour[i], tour[i + 1], tour[j], tour[(j + 1) % n]
            assert d[a, cc] + d[b, dd] - d[a, b] - d[cc, dd] >= -1e-12


def test_nearest_neighbor_picks_closest():
    c = np.array([[0.0, 0.0], [0.9, 0.9], [0.1, 0.0], [0.2, 0.0]])
    assert list(nearest_neighbor(TspInstance(c)).order) == [0, 2, 3, 1]


def test_canonical_order():
    assert list(canonical_order([3, 1, 0, 2])) == [0, 2, 3, 1]


TSPLIB_TEXT = "\n".join([
    "NAME : tiny4",
    "COMMENT : hand made",
    "TYPE : TSP",
    "DIMENSION : 4",
    "EDGE_WEIGHT_TYPE : EUC_2D",
    "NODE_COORD_SECTION",
    "1 0 0",
    "2 3 4",
    "3 6 0",
    "4 3 -4",
    "EOF",
]) + "\n"


def test_parse_tsplib():
    inst = parse_tsplib(TSPLIB_TEXT)
    assert inst.n == 4 and inst.name == "tiny4"
    np.testing.assert_array_equal(inst.raw_coords, [[0, 0], [3, 4], [6, 0], [3, -4]])
    assert inst.coords.min() >= 0 and inst.coords.max() <= 1
    assert tsplib_cost(inst.raw_coords, [0, 1, 2, 3]) == 20.0
    assert tsplib_cost(np.array([[0.0, 0.0], [3.0, 4.0]]), [0, 1]) == 10.0
    ref = attach_tsplib_optimum(inst, 20)
    assert instance_gap(ref, [0, 1, 2, 3]) == 0.0
    assert instance_gap(ref, [0, 2, 1, 3]) > 0.0


def test_tsplib_rounding_convention():
    # 1.4 rounds down, 2.5 rounds up as in the TSPLIB nint
    raw = np.array([[0.0, 0.0], [1.4, 0.0], [1.4, 2.5]])
    assert tsplib_cost(raw, [0, 1, 2]) == 1 + 3 + 3


@pytest.mark.parametrize("bad,err", [
    (TSPLIB_TEXT.replace("DIMENSION : 4", "DIMENSION : 5"), "DIMENSION"),
    (TSPLIB_TEXT.replace("EUC_2D", "GEO"), "EDGE_WEIGHT_TYPE"),
    (TSPLIB_TEXT.replace("4 3 -4", "4 3"), "malformed"),
    (TSPLIB_TEXT.replace("DIMENSION : 4\n", ""), "DIMENSION"),
])
def test_parse_tsplib_errors(bad, err):
    with pytest.raises(TsplibError, match=err):
        parse_tsplib(bad)


def test_dataset_roundtrip_and_determinism(tmp_path):
    a = build_dataset("uniform", 8, 40, 11, "heldkarp")
    b = build_dataset("uniform", 8, 40, 11, "heldkarp", threads=4)
    save_dataset(tmp_path / "a.bin", a)
    save_dataset(tmp_path / "b.bin", b)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back = load_dataset(tmp_path / "a.bin")
    assert back.kind == "uniform" and back.n == 8 and back.seed == 11 and back.label == "heldkarp"
    assert np.array_equal(back.coords, a.coords) and np.array_equal(back.tours, a.tours)
    assert np.array_equal(back.costs, a.costs)
    inst = back.instance(3)
    assert abs(inst.ref_cost - tour_cost(inst, inst.ref_tour)) < 1e-9
    assert gap(inst.ref_cost, inst.ref_cost) == 0.0


def test_dataset_unlabelled_and_nn2opt(tmp_path):
    ds = build_dataset("explosion", 20, 5, 2, "none")
    save_dataset(tmp_path / "u.bin", ds)
    back = load_dataset(tmp_path / "u.bin")
    assert not back.labelled and back.coords.shape == (5, 20, 2)
    lab = build_dataset("implosion", 20, 5, 2, "nn2opt")
    assert lab.label == "nn2opt" and lab.tours.shape == (5, 20)
    with pytest.raises(SizeError):
        build_dataset("uniform", 17, 2, 0, "heldkarp")


def test_dataset_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage" * 10)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "x.bin")


def test_write_tours_csv(tmp_path):
    write_tours_csv(tmp_path / "t.csv", [{"instance": 0, "tour": [0, 2, 1], "cost": 1.5}])
    assert (tmp_path / "t.csv").read_text() == "instance,tour,cost\n0,0 2 1,1.5\n"
