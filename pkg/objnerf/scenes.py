"""Built-in tabletop scenes: household-sized objects on a checkered table."""
from pathlib import Path
from typing import Callable, Dict, List, Tuple

import numpy as np

from objnerf.errors import SceneError
from objnerf.synthscene import (
    Albedo,
    Box,
    Cylinder,
    Primitive,
    SceneDescription,
    SceneFile,
    Sphere,
    load_scene_file,
)

BUILTIN_OBJECTS = ("ball", "book", "laptop", "cup")

_LAYOUT: Dict[str, Tuple[float, float]] = {
    "ball": (-0.16, -0.12),
    "book": (0.14, -0.14),
    "laptop": (-0.12, 0.16),
    "cup": (0.16, 0.14),
}


def tabletop_object(
    name: str, object_id: int = 1, offset: Tuple[float, float] = (0.0, 0.0)
) -> List[Primitive]:
    """Primitives of one built-in object standing on the table at ``offset``."""
    x, y = offset
    if name == "ball":
        return [
            Primitive(
                Sphere(np.array([x, y, 0.045]), 0.045),
                Albedo((0.85, 0.2, 0.15), (0.95, 0.8, 0.2), "checker", 0.025),
                object_id,
                name,
            )
        ]
    if name == "book":
        return [
            Primitive(
                Box(np.array([x - 0.1, y - 0.07, 0.0]), np.array([x + 0.1, y + 0.07, 0.04])),
                Albedo((0.15, 0.3, 0.75), (0.9, 0.9, 0.85), "checker", 0.03),
                object_id,
                name,
            )
        ]
    if name == "laptop":
        texture = Albedo((0.3, 0.3, 0.32), (0.7, 0.72, 0.75), "checker", 0.02)
        return [
            Primitive(
                Box(np.array([x - 0.125, y - 0.09, 0.0]), np.array([x + 0.125, y + 0.08, 0.015])),
                texture,
                object_id,
                name,
            ),
            Primitive(
                Box(np.array([x - 0.125, y + 0.08, 0.0]), np.array([x + 0.125, y + 0.09, 0.17])),
                texture,
                object_id,
                name,
            ),
        ]
    if name == "cup":
        return [
            Primitive(
                Cylinder(np.array([x, y, 0.0]), np.array([0.0, 0.0, 1.0]), 0.04, 0.1),
                Albedo((0.95, 0.95, 0.9), (0.2, 0.6, 0.3), "stripe", 0.02),
                object_id,
                name,
            )
        ]
    raise ValueError(f"Unknown object {name!r}, expected one of {BUILTIN_OBJECTS}")


def single_object_scene(name: str) -> SceneDescription:
    return SceneDescription(primitives=tabletop_object(name, 1))


def four_object_scene() -> SceneDescription:
    primitives: List[Primitive] = []
    for object_id, name in enumerate(BUILTIN_OBJECTS, start=1):
        primitives += tabletop_object(name, object_id, _LAYOUT[name])
    return SceneDescription(primitives=primitives)


def occluded_ball_scene() -> SceneDescription:
    """The ball (id 1) with a thin post (id 2) standing in front of it on the ``-y`` side."""
    post = Primitive(
        Box(np.array([-0.015, -0.27, 0.0]), np.array([0.015, -0.23, 0.2])),
        Albedo((0.35, 0.25, 0.2), (0.3, 0.2, 0.15), "stripe", 0.05),
        2,
        "post",
    )
    return SceneDescription(primitives=tabletop_object("ball", 1) + [post])


BUILTIN_SCENES: Dict[str, Callable[[], SceneDescription]] = {
    "four_objects": four_object_scene,
    "occluded_ball": occluded_ball_scene,
}


def builtin_scene(name: str) -> SceneDescription:
    """A name of :data:`BUILTIN_SCENES` or of a single built-in object."""
    if name in BUILTIN_SCENES:
        return BUILTIN_SCENES[name]()
    return single_object_scene(name)


def resolve_scene(name: str) -> SceneFile:
    """Looks ``name`` up among the built-in scenes and objects, then as a scene JSON file."""
    if name in BUILTIN_SCENES or name in BUILTIN_OBJECTS:
        return SceneFile(builtin_scene(name))
    if not Path(name).is_file():
        raise SceneError(
            f"{name!r} is neither a scene file nor one of the built-in scenes "
            f"{sorted(BUILTIN_SCENES)} or objects {list(BUILTIN_OBJECTS)}"
        )
    return load_scene_file(name)
