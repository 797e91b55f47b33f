import numpy as np
import pytest

from msk import averaging, fields, reeb, sde


RADIAL = fields.get_field("radial1")
DOUBLEWELL = fields.get_field("doublewell")


@pytest.fixture(scope="module")
def radial_graph():
    return reeb.build_reeb_graph(RADIAL, (-2.6, 2.6, -2.6, 2.6), 256, 6.0)


@pytest.fixture(scope="module")
def dw_graph():
    return reeb.build_reeb_graph(DOUBLEWELL, (-2.2, 2.2, -2.2, 2.2), 400, 4.0)


@pytest.fixture(scope="module")
def dw_weights(dw_graph):
    sad = dw_graph.saddle_vertices()[0]
    return averaging.gluing_weights(DOUBLEWELL, dw_graph, sad.id, cell=2e-3)


def circle_contour(radial_graph, z, cell=2e-3):
    return reeb.extract_contour(RADIAL, radial_graph, 0, z, cell)


class TestPeriod:
    @pytest.mark.parametrize("z", [2.0, 3.0])
    def test_radial_closed_form(self, radial_graph, z):
        c = circle_contour(radial_graph, z)
        t = averaging.period(RADIAL, c)
        assert abs(t - 2 * np.pi * z * z) / (2 * np.pi * z * z) < 1e-4

    def test_matches_flow_return_time(self, radial_graph):
        c = circle_contour(radial_graph, 2.0)
        t_quad = averaging.period(RADIAL, c)
        expected = 2 * np.pi * 4.0
        path = sde.hamiltonian_flow(RADIAL, np.array([1.0, 0.0]),
                                    expected * 1.05, 1e-3)
        ang = np.unwrap(np.arctan2(path.positions[:, 1], path.positions[:, 0]))
        ang -= ang[0]
        k = int(np.searchsorted(np.abs(ang), 2 * np.pi))
        t_flow = path.times[k - 1] + (2 * np.pi - abs(ang[k - 1])) / (
            abs(ang[k]) - abs(ang[k - 1])) * 1e-3
        assert abs(t_quad - t_flow) / t_flow < 1e-3


class TestContourAverage:
    def test_normalization(self, radial_graph):
        c = circle_contour(radial_graph, 2.0)
        one = averaging.contour_average(
            RADIAL, c, lambda p: np.ones(p.shape[:-1]))
        assert abs(one - 1.0) < 1e-10

    def test_radius_squared(self, radial_graph):
        for z in (2.0, 3.0):
            c = circle_contour(radial_graph, z)
            val = averaging.contour_average(
                RADIAL, c, lambda p: (p ** 2).sum(axis=-1))
            assert abs(val - (z - 1.0)) < 1e-4

    def test_time_average_along_flow(self, dw_graph):
        # ergodicity on one loop: the time average over a period matches the
        # invariant-measure average
        edge = dw_graph.edges[3]
        z = 2.8
        c = reeb.extract_contour(DOUBLEWELL, dw_graph, edge.id, z, 2e-3)
        t_period = averaging.period(DOUBLEWELL, c)
        g = lambda p: p[..., 0]  # noqa: E731
        space_avg = averaging.contour_average(DOUBLEWELL, c, g)
        x0 = c.polyline[0]
        path = sde.hamiltonian_flow(DOUBLEWELL, x0, t_period, 1e-3)
        time_avg = g(path.positions[:-1]).mean()
        assert abs(space_avg - time_avg) < 1e-3

    def test_unnormalized_route(self, radial_graph):
        c = circle_contour(radial_graph, 2.5)
        g = lambda p: p[..., 0] ** 2 + 0.3  # noqa: E731
        t = averaging.period(RADIAL, c)
        normalized = averaging.contour_average(RADIAL, c, g)
        unnormalized = averaging.contour_integral(RADIAL, c, g)
        assert abs(unnormalized - normalized * t) < 1e-10 * abs(unnormalized)


class TestEdgeCoefficients:
    @pytest.mark.parametrize("z,alpha,gamma", [
        (2.0, 1.0, 0.0),
        (3.0, 8.0 / 9.0, -2.0 / 27.0),
    ])
    def test_radial_closed_forms(self, radial_graph, z, alpha, gamma):
        a, g = averaging.edge_coefficients(RADIAL, radial_graph, 0, z)
        assert abs(a - alpha) < 1e-4
        assert abs(g - gamma) < 1e-4

    def test_alpha_positive(self, dw_graph):
        for e in dw_graph.edges:
            z = 0.5 * (e.z_lo + e.z_hi)
            a, _ = averaging.edge_coefficients(DOUBLEWELL, dw_graph, e.id, z)
            assert a > 0

    def test_identity_noise_gradient_route(self, radial_graph):
        # for identity noise the diffusion coefficient is the invariant
        # average of |grad lam|^2 / lam^2
        z = 2.5
        c = circle_contour(radial_graph, z)
        direct = averaging.contour_average(
            RADIAL, c,
            lambda p: (RADIAL.grad_lam(p) ** 2).sum(axis=-1) / RADIAL.lam(p) ** 2)
        a, _ = averaging.edge_coefficients(RADIAL, radial_graph, 0, z)
        assert abs(a - direct) < 1e-10


class TestTabulateEdge:
    @pytest.fixture(scope="class")
    def table(self, radial_graph):
        return averaging.tabulate_edge(RADIAL, radial_graph, 0, 24, cell=4e-3)

    def test_interpolation_accuracy(self, table):
        z = 2.5
        assert abs(table.alpha_at(z) - 4 * (z - 1) / z ** 2) < 1e-3

    def test_refinement_stability(self, radial_graph):
        t32 = averaging.tabulate_edge(RADIAL, radial_graph, 0, 32, cell=4e-3)
        t64 = averaging.tabulate_edge(RADIAL, radial_graph, 0, 64, cell=4e-3)
        zs = np.linspace(t64.z_nodes[0], t64.z_nodes[-1], 300)
        assert np.abs(t32.alpha_at(zs) - t64.alpha_at(zs)).max() < 1e-4

    def test_values_finite_and_monotone_period(self, table):
        assert np.all(np.isfinite(table.T))
        assert np.all(np.isfinite(table.alpha))
        assert np.all(np.isfinite(table.gamma))
        assert np.all(np.diff(table.T) > 0)  # T = 2 pi z^2 on this field

    def test_endpoint_extrapolations(self, table):
        assert table.z_nodes[0] == pytest.approx(1.0, abs=1e-9)
        assert table.alpha[0] == pytest.approx(0.0, abs=1e-4)
        assert table.gamma[0] == pytest.approx(2.0, abs=1e-4)
        assert table.T[0] == pytest.approx(2 * np.pi, rel=1e-3)

    def test_out_of_range_rejected(self, table):
        with pytest.raises(ValueError):
            table.alpha_at(0.5)
        with pytest.raises(ValueError):
            averaging.tabulate_edge(RADIAL, None, 0, 4)


class TestGluingWeights:
    def test_positive(self, dw_weights):
        assert all(w > 0 for w in dw_weights.weights.values())

    def test_conservation_across_saddle(self, dw_graph, dw_weights):
        sad = dw_graph.saddle_vertices()[0]
        above = [e for e in dw_graph.incident_edges(sad.id)
                 if e.vertex_lo == sad.id]
        below = [e for e in dw_graph.incident_edges(sad.id)
                 if e.vertex_hi == sad.id]
        assert len(above) == 1 and len(below) == 2
        rho_top = dw_weights.weights[above[0].id]
        rho_bottom = sum(dw_weights.weights[e.id] for e in below)
        assert abs(rho_top - rho_bottom) / rho_top < 0.01

    def test_noise_scaling(self, dw_graph):
        # isotropic scaling sigma -> c*sigma multiplies the diffusion
        # coefficient by c^2 but cancels inside the weights: the invariant
        # density carries 1/beta0, which absorbs the c^2 of |A lam|^2
        scaled = fields.make_polynomial_field(
            "dw-scaled", [(4, 0, 1.0), (2, 0, -2.0), (1, 0, 0.2),
                          (0, 2, 1.0), (0, 0, 2.0)],
            sigma=[[1.5, 0.0], [0.0, 1.5]])
        sad = dw_graph.saddle_vertices()[0]
        base = averaging.gluing_weights(DOUBLEWELL, dw_graph, sad.id, cell=4e-3)
        big = averaging.gluing_weights(scaled, dw_graph, sad.id, cell=4e-3)
        for eid in base.weights:
            assert big.weights[eid] / base.weights[eid] == pytest.approx(
                1.0, rel=1e-9)
        edge = dw_graph.incident_edges(sad.id)[0]
        z = 0.5 * (edge.z_lo + edge.z_hi)
        a_base, _ = averaging.edge_coefficients(DOUBLEWELL, dw_graph, edge.id, z,
                                                cell=4e-3)
        a_big, _ = averaging.edge_coefficients(scaled, dw_graph, edge.id, z,
                                               cell=4e-3)
        assert a_big / a_base == pytest.approx(2.25, rel=1e-9)

    def test_rejects_non_saddle(self, dw_graph):
        ext = [v for v in dw_graph.vertices if v.kind == "extremum"][0]
        with pytest.raises(ValueError):
            averaging.gluing_weights(DOUBLEWELL, dw_graph, ext.id)

    def test_offset_stability(self, dw_graph, dw_weights):
        finer = averaging.gluing_weights(DOUBLEWELL, dw_graph,
                                         dw_weights.vertex_id, cell=1e-3)
        for eid, rho in dw_weights.weights.items():
            assert abs(finer.weights[eid] - rho) / rho < 0.01


class TestEdgeOperator:
    @pytest.fixture(scope="class")
    def table(self, radial_graph):
        return averaging.tabulate_edge(RADIAL, radial_graph, 0, 32, cell=4e-3)

    def test_linear_function_at_driftless_level(self, table):
        f = averaging.C2Function(value=lambda z: z, d1=lambda z: 1.0,
                                 d2=lambda z: 0.0)
        # gamma(2) = 0 on this field
        assert abs(averaging.edge_operator_apply(table, f, 2.0)) < 2e-4

    def test_quadratic(self, table):
        f = averaging.C2Function(value=lambda z: z * z, d1=lambda z: 2 * z,
                                 d2=lambda z: 2.0)
        # alpha(2) = 1, gamma(2) = 0 -> value 1
        assert averaging.edge_operator_apply(table, f, 2.0) == pytest.approx(
            1.0, abs=2e-3)

    def test_constant_killed(self, table):
        f = averaging.C2Function(value=lambda z: 5.0, d1=lambda z: 0.0,
                                 d2=lambda z: 0.0)
        for z in (1.5, 2.0, 4.0):
            assert averaging.edge_operator_apply(table, f, z) == 0.0


class TestGluingResidual:
    def _const(self, c=1.0):
        return averaging.C2Function(value=lambda z, c=c: c,
                                    d1=lambda z: 0.0, d2=lambda z: 0.0)

    def test_constants_balance(self, dw_graph, dw_weights):
        funcs = {e.id: self._const() for e in dw_graph.edges}
        res = averaging.gluing_residual(dw_graph, [dw_weights], funcs)
        assert res[dw_weights.vertex_id] == 0.0

    def test_constructed_cancellation(self, dw_graph, dw_weights):
        sad = dw_graph.vertices[dw_weights.vertex_id]
        above = [e for e in dw_graph.incident_edges(sad.id)
                 if e.vertex_lo == sad.id][0]
        below = [e for e in dw_graph.incident_edges(sad.id)
                 if e.vertex_hi == sad.id]
        rho = dw_weights.weights
        # slopes: +1 on the edge above; balance the two below so the signed
        # sum cancels: rho_top*1 = rho_b1*s1 + rho_b2*s2 with s1 = s2
        s = rho[above.id] / (rho[below[0].id] + rho[below[1].id])
        slopes = {above.id: 1.0, below[0].id: s, below[1].id: s}
        zs = sad.value

        def make(slope):
            return averaging.C2Function(
                value=lambda z, m=slope: m * (z - zs),
                d1=lambda z, m=slope: m, d2=lambda z: 0.0)

        funcs = {eid: make(m) for eid, m in slopes.items()}
        for e in dw_graph.edges:
            funcs.setdefault(e.id, self._const(0.0))
        res = averaging.gluing_residual(dw_graph, [dw_weights], funcs)
        assert abs(res[sad.id]) < 1e-8 * rho[above.id]

    def test_generic_slopes_nonzero(self, dw_graph, dw_weights):
        rng = np.random.default_rng(5)
        funcs = {}
        zs = dw_graph.vertices[dw_weights.vertex_id].value
        for e in dw_graph.edges:
            m = float(rng.normal())
            funcs[e.id] = averaging.C2Function(
                value=lambda z, m=m: m * (z - zs),
                d1=lambda z, m=m: m, d2=lambda z: 0.0)
        res = averaging.gluing_residual(dw_graph, [dw_weights], funcs)
        assert abs(res[dw_weights.vertex_id]) > 1e-6

    def test_discontinuous_rejected(self, dw_graph, dw_weights):
        funcs = {e.id: self._const(float(e.id)) for e in dw_graph.edges}
        with pytest.raises(ValueError):
            averaging.gluing_residual(dw_graph, [dw_weights], funcs)


class TestQuadratureConvergence:
    def test_cell_refinement(self, radial_graph):
        vals = []
        for cell in (4e-3, 2e-3):
            a, g = averaging.edge_coefficients(RADIAL, radial_graph, 0, 2.5,
                                               cell=cell)
            vals.append((a, g))
        assert abs(vals[0][0] - vals[1][0]) / abs(vals[1][0]) < 1e-4
