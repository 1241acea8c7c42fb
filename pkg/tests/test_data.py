import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from gatedfusion.data import (
    Dataset,
    concat_features,
    generate_synthetic,
    load_dataset,
    read_embeddings,
    reframe_binary,
    stratified_split,
    write_embeddings,
    write_features_csv,
)
from gatedfusion.errors import (
    DataError,
    DimensionMismatchError,
    FormatError,
    JoinError,
    NoDominantClusterError,
    NonFiniteError,
)
from gatedfusion.forest import ForestConfig, fit_forest, predict_proba_forest


# ------------------------------------------------------------------ reframing


def test_reframe_basic():
    labels, rep = reframe_binary([0, 0, 1, 2, -1])
    assert labels.tolist() == [0, 0, 1, 1, 1]
    assert rep.dominant_cluster_id == 0
    assert rep.class0_fraction == 0.4
    assert rep.cluster_sizes == {0: 2, 1: 1, 2: 1, -1: 1}


def test_reframe_single_cluster():
    labels, rep = reframe_binary([3, 3])
    assert labels.tolist() == [0, 0]
    assert rep.class0_fraction == 1.0


def test_reframe_tie_goes_to_smallest_id():
    labels, rep = reframe_binary([5, 5, 2, 2, -1, -1, -1])
    assert rep.dominant_cluster_id == 2
    assert labels.tolist() == [1, 1, 0, 0, 1, 1, 1]


def test_reframe_noise_never_dominant():
    _, rep = reframe_binary([-1] * 10 + [4])
    assert rep.dominant_cluster_id == 4


def test_reframe_all_noise():
    with pytest.raises(NoDominantClusterError):
        reframe_binary([-1, -1])


@given(st.lists(st.integers(-1, 6), min_size=1, max_size=60).filter(lambda xs: any(x != -1 for x in xs)))
def test_reframe_properties(clusters):
    labels, rep = reframe_binary(clusters)
    sizes = [clusters.count(c) for c in set(clusters) if c != -1]
    assert int((labels == 0).sum()) == max(sizes)
    assert all(l == 1 for c, l in zip(clusters, labels) if c == -1)
    assert rep.to_dict()["class0_fraction"] == max(sizes) / len(clusters)


# ------------------------------------------------------------------ splits


def test_split_stratified_counts():
    labels = np.array([0] * 50 + [1] * 50)
    s = stratified_split(labels, 0.2, seed=7)
    assert s.test_indices.size == 20
    assert (labels[s.test_indices] == 0).sum() == 10
    assert (labels[s.test_indices] == 1).sum() == 10


def test_split_deterministic():
    labels = np.random.default_rng(1).integers(0, 2, 300)
    a = stratified_split(labels, 0.3, seed=11)
    b = stratified_split(labels, 0.3, seed=11)
    np.testing.assert_array_equal(a.test_indices, b.test_indices)
    np.testing.assert_array_equal(a.train_indices, b.train_indices)
    c = stratified_split(labels, 0.3, seed=12)
    assert not np.array_equal(a.test_indices, c.test_indices)


def test_split_errors():
    with pytest.raises(DataError):
        stratified_split([1, 1, 1], 0.2)
    with pytest.raises(ValueError):
        stratified_split([0, 1], 1.0)


def test_split_full_corpus_scale_shares():
    # test set of 19 613 rows at a 0.2 fraction -> ~98 065 rows in total
    n = 98065
    ds, _ = generate_synthetic(n, 1, 1.0, 0.0, class0_fraction=0.51861, seed=5)
    s = stratified_split(ds.labels, 0.2, seed=0)
    source_share = (ds.labels == 0).mean()
    test_share = (ds.labels[s.test_indices] == 0).mean()
    assert abs(test_share - source_share) < 1e-3
    assert abs(s.test_indices.size - 0.2 * n) <= 2


@given(
    st.lists(st.integers(0, 1), min_size=2, max_size=200).filter(lambda ys: 0 < sum(ys) < len(ys)),
    st.floats(0.05, 0.95),
    st.integers(0, 1000),
)
def test_split_properties(labels, frac, seed):
    y = np.array(labels)
    s = stratified_split(y, frac, seed)
    both = np.concatenate([s.train_indices, s.test_indices])
    assert sorted(both.tolist()) == list(range(y.size))
    for c in (0, 1):
        n_c = (y == c).sum()
        got = (y[s.test_indices] == c).sum()
        assert abs(got - n_c * frac) <= 1
    # permuting the labels only relabels indices: per-class counts are unchanged
    perm = np.random.default_rng(seed).permutation(y.size)
    s2 = stratified_split(y[perm], frac, seed)
    for c in (0, 1):
        assert (y[perm][s2.test_indices] == c).sum() == (y[s.test_indices] == c).sum()


# ------------------------------------------------------------------ concat / dataset


def _tiny(n=3, d=2):
    rng = np.random.default_rng(0)
    return Dataset(rng.normal(size=(n, d)), rng.normal(size=(n, 4)), [0, 1, 0][:n], [str(i) for i in range(n)])


def test_concat_features():
    ds = Dataset([[1.0, 2.0]], [[3.0, 4.0, 5.0, 6.0]], [1], ["a"])
    assert concat_features(ds).tolist() == [[1, 2, 3, 4, 5, 6]]


def test_concat_round_trip():
    ds = _tiny()
    x = concat_features(ds)
    assert x.shape == (3, ds.dim + 4)
    np.testing.assert_array_equal(x[:, : ds.dim], ds.deep)
    np.testing.assert_array_equal(x[:, ds.dim :], ds.aux)


@given(st.lists(st.tuples(st.integers(-3, 3), st.integers(-3, 3)), min_size=2, max_size=10, unique=True))
def test_concat_injective(rows):
    deep = np.array([[a] for a, _ in rows], float)
    aux = np.array([[b, 0, 0, 0] for _, b in rows], float)
    ds = Dataset(deep, aux, [0] * len(rows), [str(i) for i in range(len(rows))])
    x = concat_features(ds)
    assert len({tuple(r) for r in x.tolist()}) == len(rows)


def test_dataset_validation():
    with pytest.raises(DataError):
        Dataset(np.zeros((2, 3)), np.zeros((3, 4)), [0, 1], ["a", "b"])
    with pytest.raises(NonFiniteError):
        Dataset(np.array([[np.nan]]), np.zeros((1, 4)), [0], ["a"])
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1)), np.zeros((1, 4)), [2], ["a"])
    with pytest.raises(DataError):
        Dataset(np.zeros(3), np.zeros((3, 4)), [0, 1, 0], ["a", "b", "c"])
    ds = _tiny()
    with pytest.raises(ValueError):
        ds.deep[0, 0] = 1.0
    sub = ds.subset([2, 0])
    assert sub.ids == ("2", "0") and len(sub) == 2


# ------------------------------------------------------------------ synthetic


def test_synthetic_deterministic():
    a, ca = generate_synthetic(500, 8, 3.0, 1.0, seed=4)
    b, cb = generate_synthetic(500, 8, 3.0, 1.0, seed=4)
    assert a.deep.tobytes() == b.deep.tobytes()
    assert a.aux.tobytes() == b.aux.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    np.testing.assert_array_equal(ca, cb)


def test_synthetic_structure():
    ds, clusters = generate_synthetic(10000, 16, 5.0, 1.0, class0_fraction=0.51861, seed=1)
    assert abs((ds.labels == 0).sum() - 0.51861 * 10000) <= 1
    assert set(np.unique(clusters)) == set(range(11))
    np.testing.assert_array_equal(clusters == 0, ds.labels == 0)
    assert ((ds.aux[:, :3] >= 0) & (ds.aux[:, :3] <= 1)).all()


def test_synthetic_one_dimensional():
    ds, _ = generate_synthetic(100, 1, 4.0, 0.0, seed=0)
    assert ds.deep.shape == (100, 1)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n=1, d=2), dict(n=10, d=0), dict(n=10, d=2, separation=-1.0), dict(n=10, d=2, class0_fraction=1.0)],
)
def test_synthetic_invalid(kwargs):
    args = dict(n=10, d=2, separation=1.0, aux_signal=0.0)
    args.update(kwargs)
    with pytest.raises(ValueError):
        generate_synthetic(**args)


def _logistic_probe_accuracy(x_tr, y_tr, x_te, y_te):
    """Plain L2-regularised logistic regression fitted by L-BFGS."""
    xb_tr = np.hstack([x_tr, np.ones((x_tr.shape[0], 1))])
    xb_te = np.hstack([x_te, np.ones((x_te.shape[0], 1))])
    s = 2 * y_tr - 1

    def obj(w):
        z = s * (xb_tr @ w)
        val = np.logaddexp(0, -z).mean() + 1e-4 * w @ w
        grad = -(xb_tr * (s / (1 + np.exp(z)))[:, None]).mean(0) + 2e-4 * w
        return val, grad

    w = minimize(obj, np.zeros(xb_tr.shape[1]), jac=True, method="L-BFGS-B").x
    return ((xb_te @ w > 0).astype(int) == y_te).mean()


def test_synthetic_separable_by_linear_probe():
    ds, _ = generate_synthetic(20000, 64, 10.0, 2.0, seed=0)
    s = stratified_split(ds.labels, 0.2, 0)
    acc = _logistic_probe_accuracy(
        ds.deep[s.train_indices], ds.labels[s.train_indices],
        ds.deep[s.test_indices], ds.labels[s.test_indices],
    )
    assert acc >= 0.99


@pytest.mark.slow
def test_synthetic_no_signal_gives_chance_accuracy():
    # a single 2 000-row test set has ~1.1% binomial noise, so average a few seeds
    accs = []
    for seed in range(5):
        ds, _ = generate_synthetic(10000, 16, 0.0, 0.0, class0_fraction=0.51861, seed=seed)
        s = stratified_split(ds.labels, 0.2, 0)
        x = np.hstack([ds.deep, ds.aux])
        forest = fit_forest(x[s.train_indices], ds.labels[s.train_indices], ForestConfig(n_trees=25, seed=0))
        p = predict_proba_forest(forest, x[s.test_indices])
        accs.append(((p >= 0.5) == ds.labels[s.test_indices]).mean())
    assert abs(np.mean(accs) - max(0.51861, 1 - 0.51861)) <= 0.03


# ------------------------------------------------------------------ file loading


def _write_fixture(tmp_path, n=3, d=384, with_cluster=True, emb_csv=False):
    rng = np.random.default_rng(0)
    deep = rng.normal(size=(n, d)).astype(np.float32)
    aux = rng.uniform(size=(n, 4))
    ids = [str(i) for i in range(n)]
    clusters = [0, 0, 1, -1, 2][:n] if with_cluster else None
    emb = tmp_path / ("emb.csv" if emb_csv else "emb.sfl1")
    if emb_csv:
        header = "id," + ",".join(f"e{j}" for j in range(d))
        lines = [header] + [f"{i}," + ",".join(repr(float(v)) for v in deep[k]) for k, i in enumerate(ids)]
        emb.write_text("\n".join(lines) + "\n")
    else:
        write_embeddings(emb, deep)
    feats = tmp_path / "features.csv"
    write_features_csv(feats, ids, aux, clusters)
    return emb, feats, deep, aux


def test_load_binary_fixture(tmp_path):
    emb, feats, deep, aux = _write_fixture(tmp_path)
    ds = load_dataset(emb, feats)
    assert len(ds) == 3 and ds.dim == 384
    np.testing.assert_array_equal(ds.deep, deep.astype(np.float64))
    np.testing.assert_array_equal(ds.aux, aux)
    assert ds.labels.tolist() == [0, 0, 1]
    assert ds.reframing.dominant_cluster_id == 0


def test_load_csv_embeddings(tmp_path):
    emb, feats, deep, _ = _write_fixture(tmp_path, n=3, d=5, emb_csv=True)
    ds = load_dataset(emb, feats, dim=5)
    np.testing.assert_array_equal(ds.deep, deep.astype(np.float64))


def test_binary_layout(tmp_path):
    path = tmp_path / "e.sfl1"
    write_embeddings(path, np.array([[1.0, 2.0]], dtype=np.float32))
    raw = path.read_bytes()
    assert raw[:4] == b"SFL1"
    assert struct.unpack("<II", raw[4:12]) == (1, 2)
    assert struct.unpack("<2f", raw[12:]) == (1.0, 2.0)


def test_load_dimension_mismatch(tmp_path):
    emb, feats, _, _ = _write_fixture(tmp_path, d=20)
    with pytest.raises(DimensionMismatchError):
        load_dataset(emb, feats)
    assert len(load_dataset(emb, feats, dim=None)) == 3


def test_load_unknown_magic(tmp_path):
    _, feats, _, _ = _write_fixture(tmp_path)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(FormatError, match="magic"):
        load_dataset(bad, feats)


def test_load_truncated_binary(tmp_path):
    _, feats, _, _ = _write_fixture(tmp_path)
    bad = tmp_path / "bad.sfl1"
    bad.write_bytes(b"SFL1" + struct.pack("<II", 2, 2) + b"\0" * 4)
    with pytest.raises(FormatError):
        load_dataset(bad, feats, dim=2)
    bad.write_bytes(b"SFL1\0")
    with pytest.raises(FormatError):
        load_dataset(bad, feats, dim=2)


def test_load_missing_id(tmp_path):
    emb, feats, _, aux = _write_fixture(tmp_path)
    write_features_csv(feats, ["0", "2"], aux[[0, 2]], [0, 1])
    with pytest.raises(JoinError, match="'1'"):
        load_dataset(emb, feats)


def test_load_nan(tmp_path):
    emb, feats, _, _ = _write_fixture(tmp_path, d=4)
    write_embeddings(emb, np.array([[np.nan, 0, 0, 0], [0, 0, 0, 0], [1, 1, 1, 1]]))
    with pytest.raises(NonFiniteError):
        load_dataset(emb, feats, dim=4)
    emb2, feats2, _, aux = _write_fixture(tmp_path, d=4)
    aux[1, 2] = np.inf
    write_features_csv(feats2, ["0", "1", "2"], aux, [0, 0, 1])
    with pytest.raises(NonFiniteError):
        load_dataset(emb2, feats2, dim=4)


def test_load_with_label_files(tmp_path):
    emb, feats, _, aux = _write_fixture(tmp_path, d=4, with_cluster=False)
    with pytest.raises(FormatError):
        load_dataset(emb, feats, dim=4)
    labels = tmp_path / "labels.csv"
    labels.write_text("id,label\n2,1\n0,0\n1,1\n")
    ds = load_dataset(emb, feats, labels, dim=4)
    assert ds.labels.tolist() == [0, 1, 1] and ds.reframing is None
    clusters = tmp_path / "clusters.csv"
    clusters.write_text("id,cluster_label\n0,7\n1,7\n2,-1\n")
    assert load_dataset(emb, feats, clusters, dim=4).labels.tolist() == [0, 0, 1]
    labels.write_text("id,label\n0,0\n1,3\n2,1\n")
    with pytest.raises(DataError):
        load_dataset(emb, feats, labels, dim=4)
    labels.write_text("id,label\n0,0\n")
    with pytest.raises(JoinError):
        load_dataset(emb, feats, labels, dim=4)
    labels.write_text("key,label\n0,0\n")
    with pytest.raises(FormatError):
        load_dataset(emb, feats, labels, dim=4)


def test_features_csv_errors(tmp_path):
    emb, feats, _, _ = _write_fixture(tmp_path, d=4)
    feats.write_text("id,a,b\n0,1,2\n")
    with pytest.raises(FormatError, match="header"):
        load_dataset(emb, feats, dim=4)
    feats.write_text("id,rhyme_density,lexical_diversity,pronoun_ratio,popularity\n0,1,2\n")
    with pytest.raises(FormatError, match=":2"):
        load_dataset(emb, feats, dim=4)
    feats.write_text("id,rhyme_density,lexical_diversity,pronoun_ratio,popularity\n0,1,2,x,4\n")
    with pytest.raises(FormatError):
        load_dataset(emb, feats, dim=4)
    feats.write_text("id,rhyme_density,lexical_diversity,pronoun_ratio,popularity\n0,1,2,3,4\n0,1,2,3,4\n")
    with pytest.raises(FormatError, match="duplicate"):
        load_dataset(emb, feats, dim=4)


def test_sidecar_ids(tmp_path):
    emb, feats, _, aux = _write_fixture(tmp_path, d=4)
    write_features_csv(feats, ["a", "b", "c"], aux, [1, 1, 2])
    ids = tmp_path / "ids.txt"
    ids.write_text("c\nb\na\n")
    ds = load_dataset(emb, feats, dim=4, ids_path=ids)
    assert ds.ids == ("c", "b", "a")
    np.testing.assert_array_equal(ds.aux, aux[::-1])
    ids.write_text("a\nb\n")
    with pytest.raises(JoinError):
        read_embeddings(emb, ids)


def test_embeddings_csv_bad_header(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("id,x0\n0,1\n")
    with pytest.raises(FormatError):
        read_embeddings(p)
    p.write_text("id,e0\n0,1,2\n")
    with pytest.raises(FormatError):
        read_embeddings(p)
    p.write_text("id,e0\n0,abc\n")
    with pytest.raises(FormatError):
        read_embeddings(p)
    p.write_text("id,e0\n0,1\n0,2\n")
    with pytest.raises(FormatError, match="duplicate"):
        read_embeddings(p)
