"""Built-in synthetic scene suites.

These are the fixtures used by the test suite, the acceptance checks and the
``gen-scene builtin:<name>`` command.  Each function returns a
:class:`SyntheticSceneSpec`; nothing is rendered until ``generate`` runs.
"""

from __future__ import annotations

import numpy as np

from .synthetic import ObjectSpec, SyntheticSceneSpec


def one_box_scene(frames: int = 3, seed: int = 0) -> SyntheticSceneSpec:
    """A single noise-free box seen from a short orbit."""
    return SyntheticSceneSpec(
        seed=seed, objects=[ObjectSpec("box", (0.0, 0.0, 0.25), (0.5, 0.5, 0.5), "box")],
        camera={"type": "orbit", "target": [0.0, 0.0, 0.25], "radius": 2.5, "height": 1.6,
                "frames": frames, "arc_degrees": 30.0, "start_degrees": 45.0},
    )


def touching_scene(seed: int) -> SyntheticSceneSpec:
    """Two touching boxes with unrelated features and frequent combined masks.

    Seven of the ten frames show the pair as one combined mask whose feature
    sits between the two clusters.  Structure alone then fuses the pair
    (most frames contain both), features alone fuse it through the combined
    masks' in-between feature, and only the product of the two rejects it.
    """
    rng = np.random.default_rng([7, seed])
    sx, sy, sz = rng.uniform(0.35, 0.6, 3)
    sx2, sy2, sz2 = rng.uniform(0.35, 0.6, 3)
    x0, y0 = rng.uniform(-0.2, 0.2, 2)
    a = ObjectSpec("box", (x0, y0, sz / 2), (sx, sy, sz))
    b = ObjectSpec("box", (x0, y0 + sy / 2 + sy2 / 2, sz2 / 2), (sx2, sy2, sz2))
    return SyntheticSceneSpec(
        seed=seed, objects=[a, b], underseg_frames=7, depth_noise=0.001,
        camera={"type": "orbit", "target": [x0, y0 + sy / 2, 0.3], "radius": 2.8, "height": 1.7,
                "frames": 10, "arc_degrees": 24.0, "start_degrees": 34.0},
    )


def standard_scene(seed: int) -> SyntheticSceneSpec:
    """Three to four random objects, mild depth noise and the odd occluder.

    Kept small (seven frames, at most 28 masks) so exhaustive oracles stay
    cheap.
    """
    rng = np.random.default_rng([11, seed])
    count = int(rng.integers(3, 5))
    return SyntheticSceneSpec(
        seed=seed, depth_noise=0.0015, occluder_probability=0.25,
        random_objects={"count": count, "region": [[-1.1, -1.1], [1.1, 1.1]], "size_range": [0.3, 0.6], "min_gap": 0.25},
        camera={"type": "orbit", "target": [0.0, 0.0, 0.3], "radius": 3.4, "height": 2.4,
                "frames": 7, "arc_degrees": 30.0, "start_degrees": float(rng.uniform(30, 60))},
    )


def _box(cx: float, cy: float, sx: float, sy: float, sz: float, caption: str,
         category: str | None = None, noise: float | None = None) -> ObjectSpec:
    return ObjectSpec("box", (cx, cy, sz / 2), (sx, sy, sz), caption, noise, category)


def _ball(cx: float, cy: float, d: float, caption: str, category: str | None = None,
          noise: float | None = None) -> ObjectSpec:
    return ObjectSpec("sphere", (cx, cy, d / 2), (d, d, d), caption, noise, category)


def zone_views(zones: list[tuple[tuple[float, float], list[float]]], distance: float = 3.0,
               height: float = 2.2) -> dict:
    """Waypoint camera looking at each zone centre from the given azimuths (degrees).

    Cameras stay within a few metres of what they look at: the stride-4
    frame volume samples a surface about every ``4 * depth / fx`` metres,
    which must stay near the voxel size for observer tests to work.  Keep
    each zone's azimuths inside one quadrant so every view sees the same
    pair of box faces.
    """
    poses = []
    for (cx, cy), azimuths in zones:
        for a in azimuths:
            t = np.radians(a)
            poses.append({"position": [round(cx + distance * float(np.cos(t)), 4),
                                       round(cy + distance * float(np.sin(t)), 4), height],
                          "look_at": [cx, cy, 0.4]})
    return {"type": "waypoints", "poses": poses}


def chair_table_scene() -> SyntheticSceneSpec:
    """A dining table with a chair beside it, a second chair on its own and a sofa.

    The lone chair gets the cleaner features, so feature similarity alone
    prefers it for a chair-to-eat-at request while spatial context points to
    the chair next to the table.
    """
    objects = [
        _box(0.0, 0.0, 1.4, 0.9, 0.75, "dining table", "table"),
        _box(0.0, 0.8, 0.45, 0.45, 0.9, "chair", noise=0.25),
        _box(2.6, -1.6, 0.45, 0.45, 0.9, "chair", noise=0.03),
        _box(-2.4, -1.2, 1.8, 0.8, 0.8, "sofa"),
    ]
    queries = [
        {"instruction": "Prepare the chair, I want to eat.", "target": 1,
         "replies": {"round1": "a chair to sit on for a meal", "round1_closed": "chair",
                     "round2": {"choose_with_neighbor": "table"}}},
        {"instruction": "I want to relax on the sofa.", "target": 3,
         "replies": {"round1": "sofa", "round1_closed": "sofa", "round2": "1"}},
    ]
    return SyntheticSceneSpec(
        seed=3, objects=objects, depth_noise=0.002, queries=queries,
        camera=zone_views([((0.0, 0.3), [115, 135, 155]), ((2.6, -1.6), [115, 135, 155]),
                           ((-2.4, -1.2), [25, 45, 65])]),
    )


APARTMENT_OBJECTS = [
    _box(0.0, 0.0, 1.4, 0.9, 0.75, "dining table", "table"),          # 0
    _box(0.0, 0.8, 0.45, 0.45, 0.9, "chair", noise=0.25),             # 1
    _box(3.0, -1.85, 0.45, 0.45, 0.9, "chair", noise=0.04),           # 2
    _box(3.0, -2.6, 1.2, 0.6, 0.75, "desk"),                          # 3
    _box(-3.0, 1.6, 2.0, 0.9, 0.8, "sofa"),                           # 4
    _box(-3.2, -1.2, 1.2, 0.35, 0.7, "television"),                   # 5
    _box(-1.0, -2.9, 0.6, 0.5, 1.2, "red cabinet", "cabinet"),        # 6
    _box(1.6, 2.9, 0.6, 0.5, 1.2, "blue cabinet", "cabinet"),         # 7
    _ball(-1.6, 2.3, 0.3, "cup of water", "cup"),                     # 8
    _ball(1.9, -1.0, 0.3, "coffee cup", "cup"),                       # 9
    _ball(-4.2, 2.9, 0.5, "lamp"),                                    # 10
]


def _q(instruction: str, target: int, described: str, closed: str, pick=None) -> dict:
    return {"instruction": instruction, "target": target,
            "replies": {"round1": described, "round1_closed": closed,
                        "round2": pick if pick is not None else "1"}}


APARTMENT_QUERIES = [
    _q("Go to the sofa.", 4, "sofa", "sofa"),
    _q("I want to watch the news.", 5, "television", "television"),
    _q("Prepare the chair, I want to eat.", 1, "a chair to sit on for a meal", "chair",
       {"choose_with_neighbor": "table"}),
    _q("Bring me the chair at the desk so I can work.", 2, "a chair for working", "chair",
       {"choose_with_neighbor": "desk"}),
    _q("I am thirsty.", 8, "a cup of water", "cup"),
    _q("I need some coffee.", 9, "a coffee cup", "cup"),
    _q("Get my jacket from the red cabinet.", 6, "red cabinet", "cabinet"),
    _q("Open the blue cabinet.", 7, "blue cabinet", "cabinet"),
    _q("Where can I have dinner?", 0, "dining table", "table"),
    _q("I need to write an email at my desk.", 3, "desk", "desk"),
    _q("Turn on the lamp.", 10, "lamp", "lamp"),
    _q("I want to lie down for a nap on the couch.", 4, "sofa", "sofa"),
    _q("Find me a seat so I can eat dinner.", 1, "chair for eating", "chair",
       {"choose_with_neighbor": "table"}),
    _q("Put the book on the desk.", 3, "desk", "desk"),
    _q("The room is too dark.", 10, "lamp", "lamp"),
    _q("Store the plates in the red cabinet.", 6, "red cabinet", "cabinet"),
    _q("Fetch the umbrella from the blue cabinet.", 7, "blue cabinet", "cabinet"),
    _q("Switch the TV channel.", 5, "television", "television"),
    _q("Pour me a glass of water.", 8, "cup of water", "cup"),
    _q("Hand me my coffee.", 9, "coffee cup", "cup"),
]


def apartment_scene(queries: list[dict] | None = None) -> SyntheticSceneSpec:
    """Eleven objects across a living area with twenty grounding queries."""
    return SyntheticSceneSpec(
        seed=5, objects=list(APARTMENT_OBJECTS), depth_noise=0.002,
        queries=list(APARTMENT_QUERIES if queries is None else queries),
        camera=zone_views([
            ((0.0, 0.3), [115, 135, 155]),                # dining table and chair
            ((2.6, -1.9), [115, 135, 155]),               # desk, chair, coffee cup
            ((-3.0, 2.0), [-25, -45, -65]),               # sofa, cup of water, lamp
            ((-2.2, -2.0), [25, 45, 65]),                 # television, red cabinet
            ((1.6, 2.9), [-115, -135, -155]),             # blue cabinet
        ]),
    )


def demo_scene() -> SyntheticSceneSpec:
    """The apartment with five queries, used by the end-to-end demo."""
    picks = [0, 2, 4, 6, 10]
    return apartment_scene([APARTMENT_QUERIES[i] for i in picks])


BUILTIN = {
    "one-box": one_box_scene,
    "touching": lambda: touching_scene(0),
    "standard": lambda: standard_scene(0),
    "chair-table": chair_table_scene,
    "apartment": apartment_scene,
    "demo": demo_scene,
}
