import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genprop.synthworld import (
    BackgroundSpec,
    InstanceSpec,
    RenderedScene,
    SceneSpec,
    ShadowSpec,
    Trajectory,
    apply_shadow,
    load_scene,
    rasterize_shape,
    render_background,
    render_scene,
    sample_scene_spec,
    save_scene,
)
from genprop.video import MaskSequence, composite

from oracles import mask_centroid


def flat_scene(instances, canvas=(32, 32), frames=8, bg=(0.2, 0.2, 0.2)):
    return SceneSpec(
        canvas=canvas,
        background=BackgroundSpec(kind="flat", color_a=bg),
        instances=instances,
        frames=frames,
        seed=0,
    )


def static_circle(size=12.0, center=(16.0, 16.0), color=(1.0, 0.0, 0.0), shadow=None):
    return InstanceSpec(
        shape="circle",
        size=size,
        color=color,
        trajectory=Trajectory("linear", center, (0.0, 0.0)),
        shadow=shadow,
    )


class TestSampling:
    def test_same_seed_identical(self):
        a = sample_scene_spec(42, (32, 32), 8)
        b = sample_scene_spec(42, (32, 32), 8)
        assert a.to_json() == b.to_json()

    def test_hundred_seeds_all_distinct(self):
        specs = {sample_scene_spec(s, (32, 32), 8).to_json() for s in range(100)}
        assert len(specs) == 100

    def test_centers_inside_canvas(self):
        for seed in range(50):
            spec = sample_scene_spec(seed, (32, 32), 8)
            assert 1 <= len(spec.instances) <= 3
            for inst in spec.instances:
                pos = inst.trajectory.positions(spec.frames)
                assert (pos[:, 0] >= 0).all() and (pos[:, 0] <= 31).all()
                assert (pos[:, 1] >= 0).all() and (pos[:, 1] <= 31).all()

    def test_instance_color_contrast(self):
        for seed in range(50):
            spec = sample_scene_spec(seed, (32, 32), 8)
            for inst in spec.instances:
                for bg in spec.background.colors():
                    dist = np.abs(np.asarray(inst.color) - np.asarray(bg)).max()
                    assert dist >= 0.2 - 1e-9

    def test_spec_json_round_trip(self):
        spec = sample_scene_spec(7, (16, 16), 8)
        again = SceneSpec.from_json(spec.to_json())
        assert again.to_json() == spec.to_json()


class TestRender:
    def test_zero_instances(self):
        scene = render_scene(flat_scene([]))
        assert scene.instance_masks == []
        assert np.allclose(scene.video.data, np.float32(np.rint(0.2 * 255) / 255))

    def test_static_circle_matches_distance_oracle(self):
        spec = flat_scene([static_circle()])
        scene = render_scene(spec)
        ys, xs = np.mgrid[0:32, 0:32]
        oracle = (((xs - 16.0) ** 2 + (ys - 16.0) ** 2) <= 6.0**2).astype(np.float32)
        for t in range(8):
            assert np.array_equal(scene.instance_masks[0].data[t], oracle)
        area = scene.instance_masks[0].data[0].sum()
        assert abs(area - math.pi * 36.0) <= 1.0

    def test_linear_trajectory_centroid_displacement(self):
        inst = InstanceSpec(
            shape="square",
            size=8.0,
            color=(1.0, 1.0, 0.0),
            trajectory=Trajectory("linear", (6.0, 16.0), (2.0, 0.0)),
        )
        scene = render_scene(flat_scene([inst]))
        centroids = [mask_centroid(scene.instance_masks[0].data[t]) for t in range(8)]
        for t in range(7):
            dx = centroids[t + 1][0] - centroids[t][0]
            dy = centroids[t + 1][1] - centroids[t][1]
            assert abs(dx - 2.0) <= 0.5
            assert abs(dy) <= 0.5

    def test_bit_deterministic(self):
        spec = sample_scene_spec(11, (32, 32), 8)
        a = render_scene(spec)
        b = render_scene(spec)
        assert np.array_equal(a.video.data, b.video.data)
        for ma, mb in zip(a.instance_masks, b.instance_masks):
            assert np.array_equal(ma.data, mb.data)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_masks_disjoint_and_binary(self, seed):
        scene = render_scene(sample_scene_spec(seed, (32, 32), 8))
        total = np.zeros((8, 32, 32), dtype=np.float32)
        for m in scene.instance_masks:
            total += m.data
        assert total.max() <= 1.0  # no pixel owned by two instances

    def test_recompose_without_shadows(self):
        spec = sample_scene_spec(23, (32, 32), 8, shadow_prob=0.0)
        scene = render_scene(spec)
        bg = render_background(spec)
        video = np.broadcast_to(bg, (8, 32, 32, 3)).astype(np.float32)
        from genprop.video import VideoTensor

        acc = VideoTensor(video.copy())
        for inst in spec.instances:
            pos = inst.trajectory.positions(8)
            support = np.stack(
                [rasterize_shape(inst.shape, tuple(pos[t]), inst.size, (32, 32)) for t in range(8)]
            )
            layer = VideoTensor(
                np.broadcast_to(np.asarray(inst.color, dtype=np.float32), (8, 32, 32, 3)).copy()
            )
            acc = composite(acc, layer, MaskSequence(support))
        assert np.array_equal(acc.data, scene.video.data)

    def test_shadow_effect_mask_excluded_from_instance_mask(self):
        inst = static_circle(shadow=ShadowSpec(offset=(3.0, 3.0)))
        scene = render_scene(flat_scene([inst]))
        overlap = scene.instance_masks[0].data * scene.effect_masks[0].data
        assert overlap.sum() == 0.0
        assert scene.effect_masks[0].data.sum() > 0
        # shadowed pixels are darker than the background
        bg_value = np.float32(np.rint(0.2 * 255) / 255)
        effect = scene.effect_masks[0].data[0] > 0.5
        assert (scene.video.data[0][effect] < bg_value).all()

    def test_visibility_occlusion(self):
        front = static_circle(size=12.0, center=(16.0, 16.0), color=(1.0, 1.0, 0.0))
        back = static_circle(size=12.0, center=(13.0, 16.0), color=(0.0, 0.0, 1.0))
        scene = render_scene(flat_scene([back, front]))
        # the later instance is fully visible; the earlier one is clipped
        full = rasterize_shape("circle", (16.0, 16.0), 12.0, (32, 32))
        assert np.array_equal(scene.instance_masks[1].data[0], full)
        assert scene.instance_masks[0].data[0].sum() < rasterize_shape(
            "circle", (13.0, 16.0), 12.0, (32, 32)
        ).sum()


class TestDiskFormat:
    def test_scene_round_trip(self, tmp_path):
        spec = sample_scene_spec(3, (16, 16), 8)
        scene = render_scene(spec)
        save_scene(tmp_path / "scene", scene)
        loaded = load_scene(tmp_path / "scene")
        assert np.array_equal(loaded.video.data, scene.video.data)
        assert len(loaded.instance_masks) == len(scene.instance_masks)
        for a, b in zip(loaded.instance_masks, scene.instance_masks):
            assert np.array_equal(a.data, b.data)
        assert loaded.spec is not None
        assert loaded.spec.to_json() == spec.to_json()

    def test_manifest_contents(self, tmp_path):
        import json

        scene = render_scene(sample_scene_spec(5, (16, 16), 8))
        save_scene(tmp_path / "s", scene)
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest == {"fps": 8, "width": 16, "height": 16, "frames": 8}
        assert (tmp_path / "s" / "frame_00000.png").exists()
