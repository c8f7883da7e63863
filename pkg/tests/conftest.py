import pytest
from hypothesis import HealthCheck, settings

from sparsepose.config import ModelConfig
from sparsepose.pose import PoseInstance, PoseSet, SkeletonSpec, default_skeleton

settings.register_profile(
    "suite",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def spec17():
    return default_skeleton()


@pytest.fixture(scope="session")
def tiny_spec():
    return SkeletonSpec(
        name="tiny3",
        keypoint_names=("head", "tail tip", "left paw"),
        edges=((0, 1), (1, 2)),
        oks_sigmas=(0.05, 0.08, 0.07),
        render_colors=((255, 0, 0), (0, 255, 0), (0, 0, 255)),
    )


def tiny_model_config(**overrides):
    """16px model small enough for per-test construction."""
    base = dict(
        image_size=16,
        widths=(8, 12, 16),
        time_dim=16,
        text_dim=32,
        context_len=24,
        seed_dim=32,
        spr_hidden=16,
        cond_resolution=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def model16(spec17):
    """Shared read-only tiny model; tests that mutate build their own."""
    from sparsepose.backbone import build_model

    return build_model(tiny_model_config(), spec17)


def make_pose(spec, points, image_size=(32, 32), caption=None, category=None):
    """points: list per instance of {index: (x, y, v)}; others default v=0."""
    instances = []
    for mapping in points:
        kps = [(0.0, 0.0, 0)] * spec.n
        for i, triple in mapping.items():
            kps[i] = triple
        instances.append(PoseInstance(keypoints=tuple(kps)))
    return PoseSet(
        spec=spec,
        image_size=image_size,
        instances=tuple(instances),
        caption=caption,
        category=category,
    )
