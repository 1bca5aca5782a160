import numpy as np
import pytest

from mvpartseg.projection import median_nn_spacing
from mvpartseg.renderer import RenderConfig, make_top_view, render, sample_part_views
from mvpartseg.synth import (
    CorruptionSpec,
    corrupt_masks,
    generate_scene,
    oracle_masks,
    write_scene_package,
)


class TestGenerateScene:
    def test_deterministic_and_exact_size(self):
        a = generate_scene(7, 3, 20000)
        b = generate_scene(7, 3, 20000)
        assert len(a.cloud) == 60000
        assert a.cloud.positions.tobytes() == b.cloud.positions.tobytes()
        assert a.gt.class_id.tobytes() == b.gt.class_id.tobytes()
        assert a.gt.instance_id.tobytes() == b.gt.instance_id.tobytes()

    def test_every_point_labeled(self):
        scene = generate_scene(0, 2, 3000)
        assert np.all(scene.gt.instance_id > 0)
        assert np.all(scene.gt.class_id > 0)

    def test_single_object_single_part(self):
        scene = generate_scene(1, 1, 1000, parts_min=1, parts_max=1)
        assert len(np.unique(scene.gt.class_id)) == 1
        assert len(np.unique(scene.gt.instance_id)) == 1

    def test_horizontal_bboxes_disjoint_over_seeds(self):
        for seed in range(100):
            scene = generate_scene(seed, 4, 200)
            boxes = []
            for inst in np.unique(scene.gt.instance_id):
                pts = scene.cloud.positions[scene.gt.instance_id == inst]
                boxes.append((pts[:, 0].min(), pts[:, 0].max(),
                              pts[:, 1].min(), pts[:, 1].max()))
            for i in range(len(boxes)):
                for j in range(i + 1, len(boxes)):
                    a, b = boxes[i], boxes[j]
                    overlap_x = a[0] <= b[1] and b[0] <= a[1]
                    overlap_y = a[2] <= b[3] and b[2] <= a[3]
                    assert not (overlap_x and overlap_y), (seed, i, j)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_scene(0, 0)
        with pytest.raises(ValueError):
            generate_scene(0, 1, 100, parts_min=3, parts_max=2)


@pytest.fixture(scope="module")
def rendered_scene():
    scene = generate_scene(2, 3, 3000)
    rc = RenderConfig(image_size=256)
    view = make_top_view(scene.cloud, rc)
    spacing = median_nn_spacing(scene.cloud.positions)
    rendered = render(scene.cloud, view, 1.5 * spacing, rc)
    return scene, rc, rendered


class TestOracleMasks:
    def test_top_view_has_one_region_per_object(self, rendered_scene):
        scene, _, rendered = rendered_scene
        masks = oracle_masks(scene, rendered, level="instance")
        assert sorted(r.region_id for r in masks.regions) == [1, 2, 3]
        assert all(r.confidence == 1.0 for r in masks.regions)

    def test_union_of_regions_is_exactly_foreground(self, rendered_scene):
        scene, _, rendered = rendered_scene
        masks = oracle_masks(scene, rendered, level="instance", min_pixels=1)
        np.testing.assert_array_equal(masks.label_image > 0,
                                      rendered.index_image >= 0)

    def test_occluded_part_absent_from_view(self):
        scene = generate_scene(4, 1, 4000, parts_min=3, parts_max=3)
        rc = RenderConfig(image_size=256)
        idx = np.nonzero(scene.gt.instance_id == 1)[0]
        sub = scene.cloud.subset(idx)
        spacing = median_nn_spacing(sub.positions)
        # the straight-down view cannot contain purely vertical side walls
        # of the bottom slab when the upper parts cover it; more simply, a
        # class absent from the index image must have no region
        top = sample_part_views(sub, 10, rc)[-1]
        rendered = render(sub, top, 1.5 * spacing, rc)
        masks = oracle_masks(scene, rendered, level="part", point_ids=idx)
        visible_classes = set(np.unique(scene.gt.class_id[
            idx[rendered.index_image[rendered.index_image >= 0]]]))
        assert set(r.class_id for r in masks.regions) <= visible_classes

    def test_small_regions_dropped(self, rendered_scene):
        scene, _, rendered = rendered_scene
        masks = oracle_masks(scene, rendered, level="instance", min_pixels=10**9)
        assert masks.regions == ()
        assert np.all(masks.label_image == 0)


class TestCorruptMasks:
    @pytest.fixture()
    def part_masks(self):
        scene = generate_scene(5, 1, 3000)
        rc = RenderConfig(image_size=256)
        idx = np.nonzero(scene.gt.instance_id == 1)[0]
        sub = scene.cloud.subset(idx)
        spacing = median_nn_spacing(sub.positions)
        view = sample_part_views(sub, 10, rc)[0]
        rendered = render(sub, view, 1.5 * spacing, rc)
        return scene, oracle_masks(scene, rendered, level="part", point_ids=idx)

    def test_zero_spec_is_identity(self, part_masks):
        scene, masks = part_masks
        out = corrupt_masks(masks, CorruptionSpec(), scene.catalog)
        assert out is masks

    def test_flip_all_two_classes_toggles(self, part_masks):
        scene, masks = part_masks
        from mvpartseg.core import ClassCatalog
        two = ClassCatalog(((1, "base"), (2, "column")))
        # restrict regions to the two-class catalog ids
        keep = {r.region_id for r in masks.regions if r.class_id in (1, 2)}
        label = np.where(np.isin(masks.label_image, list(keep)),
                         masks.label_image, 0)
        from mvpartseg.projection import regions_from_label_image
        base = regions_from_label_image(
            label,
            {r.region_id: (r.class_id, r.class_name) for r in masks.regions
             if r.region_id in keep},
            {r.region_id: r.confidence for r in masks.regions if r.region_id in keep})
        from mvpartseg.projection import MaskSet
        masks2 = MaskSet(masks.view_id, label, base)
        out = corrupt_masks(masks2, CorruptionSpec(label_flip_rate=1.0, seed=0), two)
        for before, after in zip(masks2.regions, out.regions):
            assert after.class_id == 3 - before.class_id

    def test_deterministic_in_seed(self, part_masks):
        scene, masks = part_masks
        spec = CorruptionSpec(occluder_views=1.0, label_flip_rate=0.5,
                              dilation_px=2, seed=9)
        a = corrupt_masks(masks, spec, scene.catalog)
        b = corrupt_masks(masks, spec, scene.catalog)
        assert np.array_equal(a.label_image, b.label_image)
        assert a.regions == b.regions

    def test_dilation_keeps_invariants(self, part_masks):
        scene, masks = part_masks
        spec = CorruptionSpec(dilation_px=3, seed=1)
        out = corrupt_masks(masks, spec, scene.catalog)  # validated on build
        present = set(int(v) for v in np.unique(out.label_image) if v)
        assert present == {r.region_id for r in out.regions}
        # dilation only grows footprints
        for region in out.regions:
            before = masks.region_by_id(region.region_id)
            assert region.pixel_count >= 0.8 * before.pixel_count

    def test_blob_adds_region_with_reduced_confidence(self, part_masks):
        scene, masks = part_masks
        spec = CorruptionSpec(occluder_views=1.0, seed=3)
        out = corrupt_masks(masks, spec, scene.catalog)
        new_ids = {r.region_id for r in out.regions} - {r.region_id for r in masks.regions}
        assert len(new_ids) == 1
        blob = out.region_by_id(new_ids.pop())
        assert 0.5 <= blob.confidence <= 0.85

    def test_rates_validated(self):
        with pytest.raises(ValueError):
            CorruptionSpec(occluder_views=1.5)


class TestScenePackageWriter:
    def test_package_is_complete_and_deterministic(self, tmp_path):
        scene = generate_scene(6, 2, 2000)
        rc = RenderConfig(image_size=128)
        a = write_scene_package(tmp_path / "a", scene, n_ring=4, render_config=rc)
        b = write_scene_package(tmp_path / "b", scene, n_ring=4, render_config=rc)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        # 4 scene files + top mask pair + 2 instances x 5 views x 2 mask files
        assert len(files_a) == 4 + 2 + 2 * 5 * 2
