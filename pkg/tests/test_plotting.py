import base64
import re
import xml.etree.ElementTree as ET

import cv2
import numpy as np

from rdb.plotting import PREDICTED_COLOR, TRUTH_COLOR, contact_sheet_svg, trajectory_svg
from rdb.synthetic import GearTaskConfig, gen_gear_task


def _images(svg):
    return re.findall(r'href="data:image/png;base64,([^"]+)"', svg)


def test_trajectory_svg_is_valid_and_deterministic():
    img = np.full((64, 64, 3), 0.5)
    obs, truth = np.array([[0.1, 0.1], [0.2, 0.2]]), np.array([[0.3, 0.3], [0.4, 0.4]])
    preds = [truth + 0.01, truth - 0.01]
    svg = trajectory_svg(img, obs, truth, preds, title="a<b")
    assert svg == trajectory_svg(img, obs, truth, preds, title="a<b")
    root = ET.fromstring(svg)
    lines = [e for e in root.iter() if e.tag.endswith("polyline")]
    assert len(lines) == 4
    assert sum(e.get("stroke") == PREDICTED_COLOR for e in lines) == 2
    truth_line = next(e for e in lines if e.get("stroke") == TRUTH_COLOR)
    assert truth_line.get("points").startswith("51.20,51.20")  # joined to the last observation


def test_embedded_image_decodes():
    img = np.zeros((64, 64, 3), dtype=np.uint8)
    img[:, :, 0] = 200
    (data,) = _images(trajectory_svg(img, np.zeros((2, 2)), np.zeros((1, 2)), [np.zeros((1, 2))]))
    dec = cv2.imdecode(np.frombuffer(base64.b64decode(data), np.uint8), cv2.IMREAD_COLOR)
    assert dec.shape == (64, 64, 3) and dec[0, 0, 2] == 200  # BGR on decode: red channel preserved


def test_contact_sheet():
    ds, frames = gen_gear_task(GearTaskConfig(loops=1))
    svg = contact_sheet_svg(ds, frames, n_tiles=8, columns=4)
    ET.fromstring(svg)
    assert len(_images(svg)) == 8
    assert svg.count("<circle") == 8  # one effector per tile
