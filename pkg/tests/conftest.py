import numpy as np
import pytest

from mgnet.data import BoundingBox, Track

JAAD_STYLE_XML = """<?xml version="1.0" encoding="utf-8"?>
<annotations>
  <meta>
    <task>
      <size>40</size>
      <original_size><width>1920</width><height>1080</height></original_size>
    </task>
  </meta>
  <track id="0" label="pedestrian">
    {boxes_a}
  </track>
  <track id="1" label="pedestrian">
    {boxes_b}
  </track>
</annotations>
"""


def _cvat_box(frame: int, xtl: float, ytl: float, xbr: float, ybr: float, ped_id: str) -> str:
    return (
        f'<box frame="{frame}" keyframe="1" occluded="0" outside="0" '
        f'xtl="{xtl}" ytl="{ytl}" xbr="{xbr}" ybr="{ybr}">'
        f'<attribute name="id">{ped_id}</attribute>'
        f'<attribute name="occlusion">none</attribute></box>'
    )


def make_jaad_xml(n_frames_a: int = 25, n_frames_b: int = 20) -> str:
    boxes_a = "\n    ".join(
        _cvat_box(f, 100 + 3 * f, 200 + 1 * f, 140 + 3 * f, 300 + 1 * f, "0_1_2b")
        for f in range(n_frames_a)
    )
    boxes_b = "\n    ".join(
        _cvat_box(f, 800 - 2 * f, 400, 830 - 2 * f, 480, "0_1_3b") for f in range(n_frames_b)
    )
    return JAAD_STYLE_XML.format(boxes_a=boxes_a, boxes_b=boxes_b)


@pytest.fixture
def jaad_xml_file(tmp_path):
    p = tmp_path / "video_0001.xml"
    p.write_text(make_jaad_xml())
    return p


def make_track(length: int, video_id: str = "v0", track_id: str = "p0", start: int = 0) -> Track:
    frames = list(range(start, start + length))
    boxes = [BoundingBox(100.0 + 2 * i, 200.0 + i, 30.0, 60.0) for i in range(length)]
    return Track(track_id=track_id, video_id=video_id, frames=frames, boxes=boxes)


def random_pixel_window(rng: np.random.Generator, tau: int = 15, rho: int = 45):
    from mgnet.data import TrajectoryWindow

    obs = np.column_stack(
        [
            rng.uniform(0, 1920, tau),
            rng.uniform(0, 1080, tau),
            rng.uniform(5, 200, tau),
            rng.uniform(5, 300, tau),
        ]
    )
    fut = np.column_stack(
        [
            rng.uniform(0, 1920, rho),
            rng.uniform(0, 1080, rho),
            rng.uniform(5, 200, rho),
            rng.uniform(5, 300, rho),
        ]
    )
    anchor = BoundingBox(*obs[-1])
    return TrajectoryWindow(observed=obs, future=fut, anchor=anchor)
