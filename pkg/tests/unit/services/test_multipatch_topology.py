import numpy as np
import pytest

from api.services.errors import ConfigurationError, ConformityError, ContractError, TopologyError
from api.services.multipatch_topology import (
    AirGapCurve,
    AirGapSegment,
    MaterialKind,
    MaterialTag,
    build_dof_map,
    find_interfaces,
    neighbors,
    patch_adjacency,
    reluctivity_field,
)
from api.services.spline_geometry import KnotVector, Patch
from tests.conftest import make_domain, strip_domain, unit_patch


def rotated(patch: Patch) -> Patch:
    """Same map with both parameter directions reversed."""
    return Patch.from_net(patch.kv_u.reversed(), patch.kv_v.reversed(), patch.net[::-1, ::-1])


class TestMaterialTag:
    def test_magnet_requires_magnetization(self):
        with pytest.raises(ConfigurationError):
            MaterialTag(MaterialKind.MAGNET, 1.0)

    def test_magnetization_forbidden_elsewhere(self):
        with pytest.raises(ConfigurationError):
            MaterialTag(MaterialKind.AIR, 1.0, (1.0, 0.0))

    def test_reluctivity_positive(self):
        with pytest.raises(ConfigurationError):
            MaterialTag(MaterialKind.AIR, 0.0)

    def test_kind_from_string(self):
        tag = MaterialTag("AirGap", 2.0)  # type: ignore[arg-type]

        assert tag.kind == MaterialKind.AIR_GAP
        assert tag.is_air

    def test_iron_is_less_reluctive_than_air(self):
        assert MaterialTag.iron().reluctivity < MaterialTag.air().reluctivity


class TestInterfaces:
    def test_side_by_side(self):
        interfaces = find_interfaces([unit_patch(), unit_patch(origin=(1.0, 0.0))])

        assert len(interfaces) == 1
        itf = interfaces[0]
        assert (itf.patch_a, itf.side_a, itf.patch_b, itf.side_b) == (0, 1, 1, 0)
        assert itf.orientation_flip is False

    def test_reversed_orientation(self):
        domain = make_domain([unit_patch(2), rotated(unit_patch(2, origin=(1.0, 0.0)))])

        itf = domain.interfaces[0]
        assert (itf.side_a, itf.side_b) == (1, 1)
        assert itf.orientation_flip is True
        assert build_dof_map(domain).n_global == 15

    def test_invariant_to_patch_order(self, motor_domain):
        patches = list(motor_domain.patches)
        last = len(patches) - 1

        forward = {itf.key(): itf.orientation_flip for itf in find_interfaces(patches)}
        backward = {
            frozenset((last - p, side) for p, side in itf.key()): itf.orientation_flip
            for itf in find_interfaces(patches[::-1])
        }

        assert backward == forward
        assert len(forward) == len(motor_domain.interfaces)

    def test_partial_match_rejected(self):
        kv_u = KnotVector.uniform(1, 1)
        kv_v = KnotVector(1, [0, 0, 0.3, 1, 1])
        xs, ys = np.array([1.0, 2.0]), np.array([0.0, 0.3, 1.0])
        other = Patch.from_net(kv_u, kv_v, np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1))

        with pytest.raises(TopologyError):
            make_domain([unit_patch(1, 2), other])

    def test_dirichlet_on_interface_rejected(self):
        with pytest.raises(TopologyError):
            make_domain([unit_patch(), unit_patch(origin=(1.0, 0.0))], dirichlet=[(0, 1)])

    def test_unknown_dirichlet_side(self):
        with pytest.raises(TopologyError):
            make_domain([unit_patch()], dirichlet=[(3, 0)])

    def test_design_out_of_range(self):
        with pytest.raises(ContractError):
            make_domain([unit_patch()], design=[2])

    def test_side_kinds(self, two_patch_domain):
        assert two_patch_domain.side_kind(0, 0) == "dirichlet"
        assert two_patch_domain.side_kind(0, 1) == "interface"
        assert two_patch_domain.side_kind(0, 2) == "free"


class TestDofMap:
    def test_two_squares(self):
        dof_map = build_dof_map(make_domain([unit_patch(), unit_patch(origin=(1.0, 0.0))]))

        assert dof_map.n_global == 6
        np.testing.assert_array_equal(dof_map.local_to_global[0][[2, 3]], dof_map.local_to_global[1][[0, 1]])
        assert list(dof_map.multiplicity) == [1, 1, 2, 2, 1, 1]

    def test_all_dirichlet_cubic(self):
        domain = make_domain([unit_patch(3, 5)], dirichlet=[(0, s) for s in range(4)])

        dof_map = build_dof_map(domain)

        assert dof_map.n_global == 64
        assert dof_map.n_free == 36

    def test_l_shape(self):
        patches = [unit_patch(2, 2), unit_patch(2, 2, origin=(1.0, 0.0)), unit_patch(2, 2, origin=(0.0, 1.0))]

        domain = make_domain(patches)

        assert len(domain.interfaces) == 2
        assert build_dof_map(domain).n_global == 40

    def test_non_matching_knots(self):
        kv_v = KnotVector.uniform(1, 2)
        other = Patch.from_net(
            KnotVector.uniform(1, 1), kv_v,
            np.stack(np.meshgrid([1.0, 2.0], kv_v.greville, indexing="ij"), axis=-1),
        )
        domain = make_domain([unit_patch(2), other])

        with pytest.raises(ConformityError):
            build_dof_map(domain)

    def test_restrict_expand(self, square_domain):
        dof_map = build_dof_map(square_domain)
        vec = np.arange(dof_map.n_global, dtype=float)

        full = dof_map.expand(dof_map.restrict(vec))

        np.testing.assert_array_equal(full[dof_map.free_dofs], vec[dof_map.free_dofs])
        assert np.all(full[dof_map.dirichlet_mask] == 0.0)
        with pytest.raises(ContractError):
            dof_map.restrict(vec[:-1])

    def test_vector_map(self, square_domain):
        vmap = build_dof_map(square_domain).vector()
        field = np.arange(vmap.n_global, dtype=float)

        np.testing.assert_array_equal(vmap.join(vmap.split(field)), field)
        assert vmap.n_free == 2 * vmap.scalar.n_free


class TestAirGapCurve:
    def test_straight_line_length(self):
        patch = unit_patch(1, 2)
        curve = AirGapCurve((AirGapSegment(0, 0, 0.5, 0.0, 1.0),))

        curve.validate([patch])

        assert curve.length([patch]) == pytest.approx(1.0)

    def test_reversed_segment_arc_length_increases(self):
        patch = unit_patch(2, 2)
        samples = AirGapCurve((AirGapSegment(0, 1, 0.5, 1.0, 0.0),)).sample([patch], 3)[0]

        assert np.all(np.diff(samples.s) > 0)
        assert np.all(np.diff(samples.points[:, 0]) < 0)
        np.testing.assert_allclose(samples.tangent, np.tile([-1.0, 0.0], (samples.s.size, 1)), atol=1e-12)
        np.testing.assert_allclose(samples.s, 1.0 - samples.points[:, 0], atol=1e-12)

    def test_two_segments(self):
        domain = strip_domain(2)
        curve = AirGapCurve((AirGapSegment(0, 1, 0.5, 0.0, 1.0), AirGapSegment(1, 1, 0.5, 0.0, 1.0)))

        curve.validate(domain.patches)

        assert curve.length(domain.patches) == pytest.approx(2.0)

    def test_broken_chain(self):
        domain = strip_domain(2)
        curve = AirGapCurve((AirGapSegment(0, 1, 0.5, 0.0, 1.0), AirGapSegment(1, 1, 0.5, 1.0, 0.0)))

        with pytest.raises(ConfigurationError):
            curve.validate(domain.patches)

    def test_iso_line_must_be_knot_line(self):
        with pytest.raises(ConfigurationError):
            AirGapCurve((AirGapSegment(0, 0, 0.3, 0.0, 1.0),)).validate([unit_patch(1, 2)])

    def test_empty_curve(self):
        with pytest.raises(ConfigurationError):
            AirGapCurve(()).validate([unit_patch()])


def test_adjacency_and_neighbors():
    domain = strip_domain(3)

    adjacency = patch_adjacency(domain).toarray()

    np.testing.assert_array_equal(adjacency, [[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    assert neighbors(domain, 1) == {0, 2}


def test_reluctivity_field():
    materials = [MaterialTag.air(), MaterialTag.iron(1000.0)]
    domain = make_domain([unit_patch(), unit_patch(origin=(1.0, 0.0))], materials=materials)

    assert reluctivity_field(domain, 0) == materials[0].reluctivity
    assert reluctivity_field(domain, 1) == pytest.approx(materials[1].reluctivity)
    assert reluctivity_field(domain, 1) < reluctivity_field(domain, 0)
