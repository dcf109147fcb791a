import numpy as np
import pytest

from fieldreg.fixtures import registration_pair
from fieldreg.pipeline import plan_levels, prepare_scene
from fieldreg.registration import KeypointSet, RegistrationConfig


@pytest.fixture(scope="session")
def small_pair():
    """Distilled self-registration pair at moderate resolution.

    Returns (distilled_a, distilled_b, keypoints, gt) with gt mapping B
    coordinates into A. Session-scoped: extraction is the expensive part.
    """
    scene_a, scene_b, q_a, q_b, gt = registration_pair(seed=3, keypoint_noise=0.01)
    kp = KeypointSet(q_a, q_b)
    levels = plan_levels(RegistrationConfig(), kp)
    da = prepare_scene(scene_a, levels, resolution=64)
    db = prepare_scene(scene_b, levels, resolution=64)
    return da, db, kp, gt
