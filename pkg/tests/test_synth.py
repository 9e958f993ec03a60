import numpy as np
import pytest

from fuselidar.geometry import RigidTransform, exp, project_points
from fuselidar.synth import (
    Box,
    Checkerboard,
    Cylinder,
    RectPlane,
    SceneSpec,
    Sphere,
    generate,
    load_scene,
    stereo_noise_variant,
)


def facing_plane(distance, half=3.0, albedo=150.0):
    return RectPlane(center=[0.0, 0.0, distance], normal=[0.0, 0.0, -1.0],
                     up=[0.0, 1.0, 0.0], half_u=half, half_v=half, albedo=albedo)


def simple_spec(intr, primitives, **kw):
    defaults = dict(
        primitives=primitives,
        intrinsics=intr,
        T_WC=RigidTransform.identity(),
        T_WL=RigidTransform(t=np.array([0.05, -0.03, 0.0])),
        points_per_second=50_000.0,
        duration=1.0,
        sigma_d=0.0,
        supersample=2,
        seed=0,
    )
    defaults.update(kw)
    return SceneSpec(**defaults)


class TestLidarScan:
    def test_plane_ranges_match_analytic(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)],
                           T_WL=RigidTransform.identity())
        cloud, _, truth = generate(spec)
        assert len(cloud) > 1000
        # ray at angle theta to the plane normal hits at range 2 / cos(theta)
        dirs = cloud.xyz / np.linalg.norm(cloud.xyz, axis=1, keepdims=True)
        expect = 2.0 / dirs[:, 2]
        assert np.max(np.abs(np.linalg.norm(cloud.xyz, axis=1) - expect)) < 1e-9

    def test_zero_noise_points_on_surfaces(self, intr_plain):
        prims = [facing_plane(3.0, half=4.0),
                 Sphere(center=[0.3, 0.0, 2.0], radius=0.2),
                 Box(pose=RigidTransform(t=np.array([-0.6, 0.2, 2.2])),
                     half_sizes=[0.2, 0.2, 0.2]),
                 Cylinder(p0=[0.6, -0.5, 2.5], p1=[0.6, 0.5, 2.5], radius=0.05)]
        spec = simple_spec(intr_plain, prims, T_WL=RigidTransform.identity())
        cloud, _, truth = generate(spec)
        world = cloud.xyz  # identity lidar pose
        for i, prim in enumerate(prims):
            m = truth.point_labels == i
            if np.any(m):
                assert np.max(prim.surface_distance(world[m])) < 1e-9

    def test_range_noise_statistics(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)],
                           T_WL=RigidTransform.identity(),
                           points_per_second=100_000.0, sigma_d=0.01, seed=3)
        cloud, _, truth = generate(spec)
        measured = np.linalg.norm(cloud.xyz, axis=1)
        true_r = np.linalg.norm(truth.point_true_xyz, axis=1)
        resid = measured - true_r
        assert len(resid) >= 1e5 * 0.3
        assert abs(resid.std() - 0.01) / 0.01 < 0.03
        assert abs(resid.mean()) < 3 * 0.01 / np.sqrt(len(resid)) * 4

    def test_bearing_noise_statistics(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)],
                           T_WL=RigidTransform.identity(),
                           sigma_w=0.002, seed=4)
        cloud, _, truth = generate(spec)
        d_meas = cloud.xyz / np.linalg.norm(cloud.xyz, axis=1, keepdims=True)
        d_true = truth.point_true_xyz / np.linalg.norm(truth.point_true_xyz,
                                                       axis=1, keepdims=True)
        angle = np.arccos(np.clip(np.einsum("ij,ij->i", d_meas, d_true), -1, 1))
        # each of the two tangent components has std sigma_w
        expected_rms = 0.002 * np.sqrt(2)
        assert abs(np.sqrt(np.mean(angle**2)) - expected_rms) / expected_rms < 0.05

    def test_fov_cone_respected(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=20.0)],
                           T_WL=RigidTransform.identity(),
                           fov_half_angle_deg=20.0)
        cloud, _, _ = generate(spec)
        dirs = cloud.xyz / np.linalg.norm(cloud.xyz, axis=1, keepdims=True)
        angles = np.degrees(np.arccos(np.clip(dirs[:, 2], -1, 1)))
        assert np.max(angles) <= 20.0 + 1e-9


class TestImageRender:
    def test_checkerboard_corners_project_consistently(self, intr_plain):
        board = Checkerboard(inner_rows=7, inner_cols=5, square=0.05,
                             pose=RigidTransform(t=np.array([-0.1, -0.15, 1.5])))
        spec = simple_spec(intr_plain, [board])
        _, image, truth = generate(spec)
        corners_w, px = truth.board_corners[0]
        px2, valid = project_points(truth.T_WC.inverse().apply(corners_w),
                                    intr_plain)
        assert np.all(valid)
        assert np.max(np.abs(px - px2)) < 1e-6

    def test_depth_image_exact_for_plane(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.5, half=10.0)])
        _, _, truth = generate(spec)
        covered = truth.depth > 0
        assert covered.mean() > 0.99
        assert np.max(np.abs(truth.depth[covered] - 2.5)) < 1e-9

    def test_labels_mark_fruit_pixels(self, intr_plain):
        prims = [facing_plane(3.0, half=5.0),
                 Sphere(center=[0.0, 0.0, 1.5], radius=0.05, is_fruit=True)]
        spec = simple_spec(intr_plain, prims)
        _, _, truth = generate(spec)
        mask = truth.fruit_mask(1)
        assert mask.sum() > 100
        # mask center near the projected sphere center
        vs, us = np.nonzero(mask)
        assert abs(us.mean() - intr_plain.cx) < 2.0
        assert abs(vs.mean() - intr_plain.cy) < 2.0


class TestDeterminism:
    def test_identical_seed_identical_output(self, intr_plain):
        prims = [facing_plane(2.0), Sphere(center=[0.2, 0.1, 1.8], radius=0.04,
                                           is_fruit=True)]
        a_cloud, a_img, a_truth = generate(simple_spec(intr_plain, prims,
                                                       sigma_d=0.01, seed=9))
        b_cloud, b_img, b_truth = generate(simple_spec(intr_plain, prims,
                                                       sigma_d=0.01, seed=9))
        assert np.array_equal(a_cloud.xyz, b_cloud.xyz)
        assert np.array_equal(a_img, b_img)
        assert np.array_equal(a_truth.depth, b_truth.depth)

    def test_different_seed_differs(self, intr_plain):
        prims = [facing_plane(2.0)]
        a, _, _ = generate(simple_spec(intr_plain, prims, sigma_d=0.01, seed=1))
        b, _, _ = generate(simple_spec(intr_plain, prims, sigma_d=0.01, seed=2))
        assert not np.array_equal(a.xyz, b.xyz)


class TestStereoNoiseVariant:
    def test_constant_sigma(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)])
        _, _, truth = generate(spec)
        noisy = stereo_noise_variant(truth, base_sigma=0.02, depth_coeff=0.0, seed=5)
        m = truth.depth > 0
        resid = noisy[m] - truth.depth[m]
        assert abs(resid.std() - 0.02) / 0.02 < 0.05

    def test_quadratic_sigma_at_2m(self, intr_plain):
        spec = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)])
        _, _, truth = generate(spec)
        noisy = stereo_noise_variant(truth, base_sigma=0.0, depth_coeff=0.005, seed=6)
        m = truth.depth > 0
        resid = noisy[m] - truth.depth[m]
        # sigma = 0.005 * 2^2 = 2 cm
        assert abs(resid.std() - 0.02) / 0.02 < 0.05

    def test_quadratic_ratio_between_depths(self, intr_plain):
        spec1 = simple_spec(intr_plain, [facing_plane(1.0, half=10.0)])
        spec2 = simple_spec(intr_plain, [facing_plane(2.0, half=10.0)])
        _, _, t1 = generate(spec1)
        _, _, t2 = generate(spec2)
        r1 = stereo_noise_variant(t1, 0.0, 0.01, seed=7) - t1.depth
        r2 = stereo_noise_variant(t2, 0.0, 0.01, seed=7) - t2.depth
        ratio = r2[t2.depth > 0].std() / r1[t1.depth > 0].std()
        assert abs(ratio - 4.0) < 0.3


class TestExpectedCentroid:
    def test_visible_cap_bias_matches_brute_force(self, intr_plain):
        # independent check: dense sub-pixel quadrature over the fruit disc
        center = np.array([0.05, -0.02, 1.2])
        radius = 0.04
        prims = [facing_plane(3.0, half=5.0),
                 Sphere(center=center, radius=radius, is_fruit=True)]
        spec = simple_spec(intr_plain, prims)
        _, _, truth = generate(spec)
        centroid, bias, support = truth.expected_fruit_centroid(1, z_max=2.0)
        assert support > 500
        # bias points toward the camera: negative z, magnitude below the radius
        assert bias[2] < 0
        assert np.linalg.norm(bias) < radius
        # brute force from the mask pixels, written independently here
        mask = truth.fruit_mask(1)
        vs, us = np.nonzero(mask)
        pts = []
        for u, v in zip(us, vs):
            xn = (u - intr_plain.cx) / intr_plain.fx
            yn = (v - intr_plain.cy) / intr_plain.fy
            d = np.array([xn, yn, 1.0])
            d /= np.linalg.norm(d)
            b = d @ center
            disc = b * b - (center @ center - radius**2)
            if disc < 0:
                continue
            pts.append(d * (b - np.sqrt(disc)))
        pts = np.array(pts)
        z = pts[:, 2]
        keep = np.abs(z - z.mean()) <= 2.0 * z.std()
        expect = pts[keep].mean(axis=0)
        assert np.linalg.norm(centroid - expect) < 1e-9


class TestSceneConfig:
    def test_load_yaml(self, tmp_path):
        cfg = """
seed: 11
camera:
  intrinsics: {fx: 600, fy: 600, cx: 320, cy: 240, width: 640, height: 480}
  pose: {t: [0, 0, 0]}
lidar:
  pose: {t: [0.05, 0, 0], rpy_deg: [0, 1.0, 0]}
scan: {points_per_second: 20000, duration: 0.5, sigma_d: 0.005}
primitives:
  - {type: rect, center: [0, 0, 3], normal: [0, 0, -1], half_u: 3, half_v: 2}
  - {type: sphere, center: [0.1, 0, 1.5], radius: 0.04, fruit: true}
  - {type: checkerboard, inner_rows: 7, inner_cols: 5, square: 0.05,
     pose: {t: [-0.4, -0.2, 2.0]}}
"""
        path = tmp_path / "scene.yaml"
        path.write_text(cfg)
        spec = load_scene(path)
        assert spec.seed == 11
        assert len(spec.primitives) == 3
        assert spec.sigma_d == 0.005
        cloud, image, truth = generate(spec)
        assert len(cloud) > 100
        assert image.shape == (480, 640, 3)

    def test_validation(self, intr_plain):
        with pytest.raises(ValueError):
            SceneSpec(primitives=[], intrinsics=intr_plain,
                      T_WC=RigidTransform.identity(),
                      T_WL=RigidTransform.identity(), duration=-1.0)
