import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgvqa.scene_graph import (
    BoundingBox,
    MalformedDocument,
    NoiseSpec,
    Ontology,
    SceneGraph,
    SceneObject,
    UnknownObject,
    corrupt,
    content_onehot,
    dumps_graph,
    generate_scene,
    graph_to_json,
    load_scene_graph,
    loads_graph,
    projection_matrix,
    read_any_graph,
    roi_feature,
    spatial_predicate,
    validate_graph,
)

from conftest import make_graph, obj


def test_full_image_box_normalizes_to_unit(ontology):
    doc = {"width": 640, "height": 480, "objects": {"1": {"name": "cup", "x": 0, "y": 0, "w": 640, "h": 480}}}
    g = load_scene_graph(doc, ontology, "img")
    assert g["1"].box.as_list() == [0.0, 0.0, 1.0, 1.0]


def test_dangling_relation_dropped_and_counted(ontology):
    doc = {"width": 10, "height": 10, "objects": {
        "1": {"name": "cup", "x": 0, "y": 0, "w": 2, "h": 2, "relations": [{"name": "above", "object": "99"}]}}}
    g = load_scene_graph(doc, ontology)
    assert len(g.objects) == 1
    assert g.edges == ()
    assert g.dropped_edges == 1


def test_fixture_counts(gqa_scene_doc, ontology):
    (image_id, doc), = gqa_scene_doc.items()
    g = load_scene_graph(doc, ontology, image_id)
    assert len(g.objects) == 3
    assert len(g.edges) == 2
    assert g["1001"].attributes == {"color": "red", "material": "wood"}
    assert g["1002"].box.x == pytest.approx(200 / 500)
    assert g["1002"].box.h == pytest.approx(100 / 333)


def test_unknown_names_flagged_not_rejected(ontology):
    doc = {"width": 10, "height": 10, "objects": {
        "1": {"name": "giraffe", "x": 0, "y": 0, "w": 2, "h": 2, "attributes": ["spotted"],
              "relations": [{"name": "eating", "object": "2"}]},
        "2": {"name": "cup", "x": 5, "y": 5, "w": 2, "h": 2}}}
    g = load_scene_graph(doc, ontology)
    assert set(g.unknown_names) == {"class:giraffe", "attribute:spotted", "relation:eating"}
    assert g.edges[0].relation_name == "eating"


def test_malformed_document(ontology):
    with pytest.raises(MalformedDocument):
        load_scene_graph({"objects": {}}, ontology)
    with pytest.raises(MalformedDocument):
        load_scene_graph({"width": 1, "height": 1, "objects": {"1": {"name": "cup"}}}, ontology)


def test_boxes_clipped_into_image(ontology):
    doc = {"width": 100, "height": 100, "objects": {"1": {"name": "cup", "x": 90, "y": -5, "w": 30, "h": 20}}}
    b = load_scene_graph(doc, ontology)["1"].box
    assert b.x + b.w <= 1.0 and b.y >= 0.0


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox(0.5, 0.5, 0.6, 0.1)
    with pytest.raises(ValueError):
        BoundingBox(0.1, 0.1, 0.0, 0.1)


def test_graph_rejects_dangling_edge():
    with pytest.raises(ValueError):
        make_graph([obj("a", "cup", (0, 0, 0.1, 0.1))], [("a", "above", "zz")])


def test_unknown_object_lookup(bird_graph):
    with pytest.raises(UnknownObject):
        bird_graph["nope"]


def test_single_object_has_no_edges(ontology):
    assert generate_scene(ontology, 1, 3).edges == ()


def test_left_right_edges_follow_centers(ontology):
    g = generate_scene(ontology, 2, 5)
    a, b = g.objects.values()
    if a.box.center[0] > b.box.center[0]:
        a, b = b, a
    edges = {(e.subject_id, e.relation_name, e.object_id) for e in g.edges}
    assert (a.id, "to the left of", b.id) in edges
    assert (b.id, "to the right of", a.id) in edges


def test_generation_is_deterministic(ontology):
    assert dumps_graph(generate_scene(ontology, 6, 42)) == dumps_graph(generate_scene(ontology, 6, 42))
    assert dumps_graph(generate_scene(ontology, 6, 42)) != dumps_graph(generate_scene(ontology, 6, 43))


def test_generated_edges_match_geometry(small_world):
    for g in small_world:
        edges = {(e.subject_id, e.relation_name, e.object_id) for e in g.edges}
        for a in g.objects.values():
            for b in g.objects.values():
                if a.id == b.id:
                    continue
                (ax, ay), (bx, by) = a.box.center, b.box.center
                assert ((a.id, "to the left of", b.id) in edges) == (ax < bx)
                assert ((a.id, "to the right of", b.id) in edges) == (ax > bx)
                assert ((a.id, "above", b.id) in edges) == (ay < by)
                assert ((a.id, "below", b.id) in edges) == (ay > by)


def test_generated_attributes_are_plausible(small_world, ontology):
    for g in small_world:
        for o in g.objects.values():
            for cat, v in o.attributes.items():
                assert v in ontology.plausible_values(o.class_name, cat)
        assert validate_graph(g, ontology) == []


def test_corrupt_zero_noise_is_identity(small_world, ontology):
    for g in small_world[:10]:
        assert corrupt(g, NoiseSpec(seed=3), ontology) == g


def test_corrupt_drop_everything(small_world, ontology):
    g = corrupt(small_world[0], NoiseSpec(p_drop_obj=1.0), ontology)
    assert g.objects == {} and g.edges == ()


def test_corrupt_respects_protected(small_world, ontology):
    g = small_world[0]
    keep = next(iter(g.objects))
    out = corrupt(g, NoiseSpec(p_drop_obj=1.0), ontology, protected=[keep])
    assert list(out.objects) == [keep]


def test_class_corruption_rate_binomial(ontology):
    # oracle: count against the uncorrupted twin
    objects = [SceneObject(f"o{i}", "cup", {"color": "red", "material": "glass", "size": "small", "shape": "round"},
                           BoundingBox(0.1, 0.1, 0.1, 0.1)) for i in range(1000)]
    g = SceneGraph("big", {o.id: o for o in objects}, ())
    out = corrupt(g, NoiseSpec(p_class=0.5, seed=1), ontology)
    changed = sum(out[o.id].class_name != o.class_name for o in objects)
    assert 450 <= changed <= 550


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(0, 10**6))
def test_corruption_preserves_invariants(pc, pa, pe, po, seed):
    from sgvqa.scene_graph import default_ontology

    onto = default_ontology()
    g = generate_scene(onto, 1 + seed % 8, seed % 997)
    out = corrupt(g, NoiseSpec(pc, pa, pe, po, seed), onto)
    assert validate_graph(out, onto) == []
    assert set(out.objects) <= set(g.objects)
    assert corrupt(g, NoiseSpec(pc, pa, pe, po, seed), onto) == out


def test_spatial_predicate_examples():
    g = make_graph([obj("a", "cup", (0.0, 0.0, 0.1, 0.1)), obj("b", "cup", (0.45, 0.45, 0.1, 0.1))])
    assert spatial_predicate(g, "a", "hposition:left")
    assert spatial_predicate(g, "a", "vposition:top")
    assert spatial_predicate(g, "b", "hposition:middle")
    assert spatial_predicate(g, "b", "vposition:middle")
    with pytest.raises(ValueError):
        spatial_predicate(g, "a", "hposition:top")


def test_spatial_predicate_matches_raw_thirds():
    rng = np.random.default_rng(0)
    for k in range(5):
        w, h = rng.uniform(0.01, 0.3, 2)
        x, y = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        g = make_graph([obj("a", "cup", (x, y, w, h))])
        cx, cy = x + w / 2, y + h / 2
        want_h = "left" if cx < 1 / 3 else "right" if cx > 2 / 3 else "middle"
        want_v = "top" if cy < 1 / 3 else "bottom" if cy > 2 / 3 else "middle"
        for lab in ("left", "middle", "right"):
            assert spatial_predicate(g, "a", f"hposition:{lab}") == (lab == want_h)
        for lab in ("top", "middle", "bottom"):
            assert spatial_predicate(g, "a", f"vposition:{lab}") == (lab == want_v)


def test_canonical_round_trip(small_world, gqa_scene_doc, ontology):
    for g in small_world[:10]:
        assert loads_graph(dumps_graph(g)) == g
        assert dumps_graph(loads_graph(dumps_graph(g))) == dumps_graph(g)
    (image_id, doc), = gqa_scene_doc.items()
    g = load_scene_graph(doc, ontology, image_id)
    again = read_any_graph(json.loads(dumps_graph(g)), ontology)
    assert again == g
    assert read_any_graph(doc, ontology).objects == g.objects


def test_canonical_field_order(bird_graph):
    doc = graph_to_json(bird_graph)
    assert list(doc) == ["image_id", "width", "height", "objects", "edges"]
    assert list(doc["objects"][0]) == ["id", "class", "attributes", "box"]


def test_ontology_json_round_trip(ontology):
    assert Ontology.from_json(json.loads(json.dumps(ontology.to_json()))) == ontology


def test_ontology_requires_mandatory_categories():
    with pytest.raises(ValueError):
        Ontology(("cup",), {"color": ("red",)}, (), {})


def test_roi_feature_deterministic_without_noise(ontology):
    a = make_graph([obj("a", "cup", (0.1, 0.1, 0.1, 0.1))], image_id="g1")
    b = make_graph([obj("a", "cup", (0.5, 0.5, 0.1, 0.1))], image_id="g2")
    fa = roi_feature(a, "a", 64, 0, ontology, noise_scale=0.0)
    fb = roi_feature(b, "a", 64, 0, ontology, noise_scale=0.0)
    np.testing.assert_array_equal(fa, fb)


def test_roi_feature_linear_in_content(ontology):
    g = make_graph([obj("a", "cup", (0.1, 0.1, 0.1, 0.1), color="red"),
                    obj("b", "cup", (0.5, 0.5, 0.1, 0.1), color="blue")])
    vocab = ontology.feature_vocabulary()
    P = projection_matrix(vocab, 32, 4)
    diff = roi_feature(g, "a", 32, 4, ontology, 0.0) - roi_feature(g, "b", 32, 4, ontology, 0.0)
    want = P @ (content_onehot(g["a"], vocab) - content_onehot(g["b"], vocab))
    np.testing.assert_allclose(diff, want, atol=1e-12)


def test_roi_feature_finite_nonzero(bird_graph, ontology):
    r = roi_feature(bird_graph, "o2", 64, 0, ontology)
    assert np.all(np.isfinite(r)) and np.linalg.norm(r) > 0
    np.testing.assert_array_equal(r, roi_feature(bird_graph, "o2", 64, 0, ontology))
