import pytest

from ctmrelax.network import NetworkError, max_stable_dt, validate_graph, validate_merge_partition

from conftest import bundled, cell, net, single_cell


class TestGraph:
    def test_self_loop_at_a_busy_vertex(self):
        """A loop edge makes its vertex both merging and diverging."""
        cells = [cell(0, 0, 1, infinite=True), cell(1, 2, 1, infinite=True), cell(2, 1, 1), cell(3, 1, 3)]
        beta = {(2, 0): 0.5, (3, 0): 0.5, (2, 1): 0.5, (3, 1): 0.5, (2, 2): 0.5, (3, 2): 0.5}
        rep = validate_graph(net(cells, beta, symmetric={1}))
        assert {"self-loop", "merge-and-diverge"} <= rep.codes()
        assert any(v.subject == "e3" for v in rep.violations if v.code == "self-loop")

    def test_chain_is_clean(self):
        cells = [cell(0, 0, 1, infinite=True), cell(1, 1, 2), cell(2, 2, 3)]
        n = net(cells, {(1, 0): 1.0, (2, 1): 1.0})
        assert n.validate().ok
        assert validate_graph(n).format() == "clean"

    def test_merge_without_outlet(self):
        cells = [cell(0, 0, 2, infinite=True), cell(1, 1, 2, infinite=True)]
        assert "merge is sink" in validate_graph(net(cells, {}, symmetric={2})).codes()


def merge3(**kw):
    cells = [cell(0, 0, 2, infinite=True), cell(1, 1, 2, infinite=True), cell(2, 2, 3, infinite=kw.pop("inf", False))]
    return net(cells, {(2, 0): 1.0, (2, 1): 1.0}, **kw)


class TestPartition:
    def test_double_classification(self):
        rep = validate_merge_partition(merge3(symmetric={2}, asymmetric={2: 1}))
        assert "partition violated" in rep.codes()

    def test_unclassified(self):
        assert "merge unclassified" in validate_merge_partition(merge3()).codes()

    def test_subcritical_outlet_must_be_unbounded(self):
        assert "finite subcritical outlet" in validate_merge_partition(merge3(subcritical={2})).codes()
        assert validate_merge_partition(merge3(subcritical={2}, inf=True)).ok

    def test_ramp_must_feed_the_junction(self):
        assert "asymmetric ramp" in validate_merge_partition(merge3(asymmetric={2: 2})).codes()

    def test_finite_source(self):
        cells = [cell(0, 0, 1), cell(1, 1, 2)]
        assert "finite source" in validate_merge_partition(net(cells, {(1, 0): 1.0})).codes()

    @pytest.mark.parametrize("name", ["artificial", "rocade", "rocade-capacity-drop", "example1", "example2"])
    def test_bundled_clean(self, name):
        assert bundled(name).network.validate().ok

    def test_artificial_junction_counts(self):
        n = bundled("artificial").network
        assert (len(n.symmetric), len(n.asymmetric), len(n.subcritical)) == (2, 4, 1)

    @pytest.mark.parametrize("name", ["artificial", "rocade", "example1"])
    def test_cell_classes_partition(self, name):
        n = bundled(name).network
        groups = [set(n.n_symmetric), set(n.n_asymmetric), set(n.n_subcritical), set(n.n_free)]
        assert sum(len(g) for g in groups) == n.n
        assert set().union(*groups) == set(range(n.n))


class TestTurningRates:
    def test_sum_above_one(self):
        cells = [cell(0, 0, 1, infinite=True), cell(1, 1, 2), cell(2, 1, 3)]
        rep = net(cells, {(1, 0): 0.7, (2, 0): 0.6}).validate()
        assert any("sum" in v.message for v in rep.violations)

    def test_not_adjacent(self):
        cells = [cell(0, 0, 1, infinite=True), cell(1, 1, 2), cell(2, 5, 6)]
        rep = net(cells, {(1, 0): 1.0, (2, 0): 0.5}).validate()
        assert any("not adjacent" in v.message for v in rep.violations)

    def test_offramp_deficit_allowed(self):
        cells = [cell(0, 0, 1, infinite=True), cell(1, 1, 2)]
        assert net(cells, {(1, 0): 0.8}).validate().ok


class TestStepBound:
    def test_rocade(self):
        assert max_stable_dt(bundled("rocade").network) * 3600 == pytest.approx(20)

    def test_artificial(self):
        n = bundled("artificial").network
        assert max_stable_dt(n) * 3600 == pytest.approx(18)
        assert n.dt_h * 3600 == pytest.approx(15)

    def test_single_cell(self):
        assert max_stable_dt(single_cell()) * 3600 == pytest.approx(36)

    def test_rejects_large_step(self):
        n = single_cell(dt_s=40)
        assert "step size" in n.validate().codes()
        with pytest.raises(NetworkError):
            n.checked()
