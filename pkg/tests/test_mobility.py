"""Routes, trajectory sampling and UAV placement."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmwave_uav_sim.errors import RouteError
from mmwave_uav_sim.mobility import (
    GROUND_MODELS,
    UAV_MODELS,
    Route,
    VehicleAssignment,
    assign_models,
    ingest_routes,
    load_routes_file,
    parse_routes,
    place_ground_vehicle,
    place_uav,
    pose_at,
    routes_document,
    sample_count,
    sample_trajectory,
    vehicle_model,
    vehicle_placement,
)


def straight(speed: float = 10.0) -> Route:
    return Route("straight", np.array([[0.0, 0.0, 0.0], [100.0, 0.0, 0.0]]), speed)


def l_shaped(speed: float = 10.0) -> Route:
    return Route("corner", np.array([[0.0, 0.0, 0.0], [30.0, 0.0, 0.0], [30.0, 40.0, 0.0]]), speed)


def routes_doc(speed: float = 15.0, model: str = "domestico") -> dict:
    return {
        "routes": [{"id": "r0", "speed_mps": speed, "waypoints": [[-50, 0], [50, 0]]}],
        "vehicles": [{"id": 0, "route": "r0", "model": model}],
    }


def test_uav_models_match_reference_airframes():
    assert UAV_MODELS["entregas"].size_m == pytest.approx((0.914, 0.914, 0.336))
    assert UAV_MODELS["domestico"].size_m == pytest.approx((0.2895, 0.2895, 0.196))
    assert UAV_MODELS["rural"].size_m == pytest.approx((0.716, 0.22, 0.236))
    assert UAV_MODELS["domestico"].v_max == 20.0
    assert GROUND_MODELS["carro"].size_m == pytest.approx((4.5, 1.8, 1.5))


def test_sample_count():
    assert sample_count(0.1, 1.0) == 11
    assert sample_count(0.1, 0.0) == 1
    assert sample_count(0.1, 5.0) == 51
    with pytest.raises(RouteError):
        sample_count(0.0, 1.0)


def test_route_length_and_duration():
    route = l_shaped()
    assert route.length == pytest.approx(70.0)
    assert route.duration == pytest.approx(7.0)


def test_pose_interpolates_along_segments():
    route = l_shaped()
    pose = pose_at(route, 2.5)
    np.testing.assert_allclose(pose.position, [25.0, 0.0, 0.0])
    np.testing.assert_allclose(pose.heading, [1.0, 0.0, 0.0])
    pose = pose_at(route, 4.0)
    np.testing.assert_allclose(pose.position, [30.0, 10.0, 0.0])
    np.testing.assert_allclose(pose.heading, [0.0, 1.0, 0.0])


def test_vehicle_parks_at_route_end():
    samples = sample_trajectory(straight(), t_sam=1.0, duration=20.0)
    assert len(samples) == 21
    np.testing.assert_allclose(samples[-1].position, [100.0, 0.0, 0.0])
    np.testing.assert_allclose(samples[10].position, [100.0, 0.0, 0.0])


def test_start_offset_shifts_the_vehicle():
    pose = pose_at(straight(), 1.0, start_offset_m=30.0)
    np.testing.assert_allclose(pose.position, [40.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(
    speed=st.floats(min_value=1.0, max_value=24.5),
    t_sam=st.floats(min_value=0.01, max_value=1.0),
    offset=st.floats(min_value=0.0, max_value=60.0),
)
def test_displacement_never_exceeds_speed(speed, t_sam, offset):
    samples = sample_trajectory(l_shaped(speed), t_sam, duration=5.0, start_offset_m=offset)
    for a, b in zip(samples, samples[1:]):
        assert np.linalg.norm(b.position - a.position) <= speed * t_sam + 1e-9


def test_route_validation():
    with pytest.raises(RouteError):
        Route("one", np.array([[0.0, 0.0, 0.0]]), 10.0)
    with pytest.raises(RouteError):
        Route("slow", np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 0.0)
    with pytest.raises(RouteError, match="repeats"):
        Route("dup", np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]), 1.0)


def test_place_uav_hangs_antenna_below_body():
    model = UAV_MODELS["domestico"]
    placement = place_uav(pose_at(straight(), 1.0), model, altitude=100.0, uav_id=3)
    body = placement.body_mesh
    assert placement.uav_id == 3
    assert body.min[2] == pytest.approx(100.0 - 0.098)
    assert body.max[2] == pytest.approx(100.0 + 0.098)
    np.testing.assert_allclose(placement.rx_position, [10.0, 0.0, 100.0 - 0.098 - 0.05])
    assert body.material == "metal"


def test_place_uav_aligns_long_side_with_heading():
    model = UAV_MODELS["rural"]
    along_x = place_uav(pose_at(straight(), 0.0), model, 50.0).body_mesh
    along_y = place_uav(pose_at(l_shaped(), 5.0), model, 50.0).body_mesh
    assert along_x.max[0] - along_x.min[0] == pytest.approx(0.716)
    assert along_y.max[1] - along_y.min[1] == pytest.approx(0.716)


def test_place_uav_rejects_low_altitude():
    with pytest.raises(RouteError, match="ground clearance"):
        place_uav(pose_at(straight(), 0.0), UAV_MODELS["entregas"], altitude=0.2)


def test_ground_vehicle_rests_on_road():
    placement = place_ground_vehicle(pose_at(straight(), 0.0), GROUND_MODELS["carro"], vehicle_id=7)
    assert placement.body_mesh.min[2] == 0.0
    assert placement.body_mesh.max[2] == pytest.approx(1.5)
    assert placement.rx_position[2] == pytest.approx(1.55)


def test_vehicle_placement_uses_assignment():
    plan = parse_routes(routes_doc())
    placement = vehicle_placement(plan.vehicles[0], plan, time=2.0, altitude=50.0)
    assert placement.rx_position[0] == pytest.approx(-20.0)
    ground = VehicleAssignment(vehicle_id=1, route_id="r0", model="carro", kind="ground")
    assert vehicle_placement(ground, plan, time=0.0, altitude=50.0).body_mesh.min[2] == 0.0


def test_assign_models_is_seeded():
    models = list(UAV_MODELS.values())
    first = assign_models(10, models, 7)
    assert [m.name for m in first] == [m.name for m in assign_models(10, models, 7)]
    assert {m.name for m in first} <= set(UAV_MODELS)
    with pytest.raises(RouteError):
        assign_models(0, models, 7)


def test_parse_routes_checks_speed_against_model():
    with pytest.raises(RouteError, match="exceeds v_max"):
        parse_routes(routes_doc(speed=21.0, model="domestico"))
    assert parse_routes(routes_doc(speed=21.0, model="entregas")).vehicles[0].model == "entregas"


def test_parse_routes_errors():
    with pytest.raises(RouteError):
        parse_routes({"routes": [{"id": "r0", "speed_mps": 10}]})
    with pytest.raises(RouteError, match="Duplicate route"):
        doc = routes_doc()
        doc["routes"].append(dict(doc["routes"][0]))
        parse_routes(doc)
    with pytest.raises(RouteError, match="Unknown vehicle model"):
        parse_routes(routes_doc(model="zeppelin"))
    with pytest.raises(RouteError, match="Unknown route"):
        doc = routes_doc()
        doc["vehicles"][0]["route"] = "missing"
        parse_routes(doc)
    with pytest.raises(RouteError):
        vehicle_model("zeppelin")


def test_routes_file_round_trip(tmp_path):
    path = tmp_path / "routes.json"
    path.write_text(json.dumps(routes_doc()))
    plan = load_routes_file(path)
    assert routes_document(plan) == {
        "routes": [{"id": "r0", "speed_mps": 15.0, "waypoints": [[-50.0, 0.0], [50.0, 0.0]]}],
        "vehicles": [{"id": 0, "route": "r0", "model": "domestico", "start_offset_m": 0.0, "kind": "uav"}],
    }
    routes = ingest_routes(path)
    assert [r.route_id for r in routes] == ["r0"]
    assert routes[0].length == pytest.approx(100.0)


def test_load_routes_file_bad_json(tmp_path):
    path = tmp_path / "routes.json"
    path.write_text("{not json")
    with pytest.raises(RouteError, match="invalid JSON"):
        load_routes_file(path)
