# GNU General Public License v3.0+ (see LICENSES/GPL-3.0-or-later.txt or
# https://www.gnu.org/licenses/gpl-3.0.txt)
# SPDX-License-Identifier: GPL-3.0-or-later
# SPDX-FileCopyrightText: 2024, neighbormix contributors
"""Static SVG figures of class activation sequences."""

from __future__ import annotations

from xml.sax.saxutils import escape

from .infer import InferenceResult
from .synthdata import FeatureSequence
from .utils.io import write_file

PLOT_LEFT = 80.0
PLOT_WIDTH = 800.0
PANEL_HEIGHT = 60.0
PANEL_GAP = 24.0
TOP = 40.0
BAR_HEIGHT = 6.0

CURVE_COLOR = "#1f77b4"
GT_COLOR = "#2ca02c"
PROPOSAL_COLOR = "#d62728"

PREAMBLE = """\
<?xml version="1.0" standalone="no"?>
<!-- video %(video_id)s: %(num_snippets)d snippets of %(snippet_duration)g s -->
<!-- x_px = %(left)g + t_seconds * %(px_per_second).6f -->
<!-- panel c: top = %(top)g + c * %(stride)g, y_px = top + %(panel)g * (1 - score) -->
<svg width="%(width)d" height="%(height)d" viewBox="0 0 %(width)d %(height)d" version="1.1"
    xmlns="http://www.w3.org/2000/svg">
<rect x="0" y="0" width="%(width)d" height="%(height)d" style="fill:#ffffff"/>
<text x="%(left)g" y="20" font-size="12" font-family="monospace">%(video_id)s</text>
"""

POSTAMBLE = """\
</svg>
"""


class SVG:
    """Collects SVG elements on a fixed pixel canvas."""

    def __init__(self) -> None:
        self.commands: list[str] = []

    def rect(
        self,
        x: float,
        y: float,
        width: float,
        height: float,
        color: str,
        opacity: float = 1.0,
    ) -> None:
        self.commands.append(
            '<rect x="%.2f" y="%.2f" width="%.2f" height="%.2f"'
            ' style="fill:%s;fill-opacity:%.2f"/>' % (x, y, width, height, color, opacity)
        )

    def line(self, points: list[tuple[float, float]], color: str, width: float = 1.0) -> None:
        self.commands.append(
            '<polyline points="%s" style="fill:none;stroke:%s;stroke-width:%.2f"/>'
            % (" ".join("%.2f,%.2f" % point for point in points), color, width)
        )

    def text(self, x: float, y: float, text: str, color: str = "#666666") -> None:
        self.commands.append(
            '<text x="%.2f" y="%.2f" fill="%s" font-size="10" font-family="monospace">%s</text>'
            % (x, y, color, escape(text))
        )


def render_tcas(result: InferenceResult, video: FeatureSequence) -> str:
    """
    One panel per action class with the activation curve, ground truth segments as shaded bands
    and final proposals as bars along the panel's bottom edge.
    """
    num_snippets, num_classes = result.scores.shape
    duration = num_snippets * result.snippet_duration
    px_per_second = PLOT_WIDTH / duration
    stride = PANEL_HEIGHT + PANEL_GAP

    def x_px(seconds: float) -> float:
        return PLOT_LEFT + seconds * px_per_second

    svg = SVG()
    for class_id in range(num_classes):
        top = TOP + class_id * stride
        bottom = top + PANEL_HEIGHT
        svg.rect(PLOT_LEFT, top, PLOT_WIDTH, PANEL_HEIGHT, "#f4f4f4")
        svg.text(8, top + PANEL_HEIGHT / 2, f"class {class_id}")
        for segment in video.segments:
            if segment.class_id == class_id:
                svg.rect(
                    x_px(segment.t_start),
                    top,
                    x_px(segment.t_end) - x_px(segment.t_start),
                    PANEL_HEIGHT,
                    GT_COLOR,
                    0.3,
                )
        # snippet centers
        svg.line(
            [
                (
                    x_px((index + 0.5) * result.snippet_duration),
                    bottom - float(result.scores[index, class_id]) * PANEL_HEIGHT,
                )
                for index in range(num_snippets)
            ],
            CURVE_COLOR,
        )
        for proposal in result.proposals:
            if proposal.class_id == class_id:
                svg.rect(
                    x_px(proposal.t_start),
                    bottom - BAR_HEIGHT,
                    x_px(proposal.t_end) - x_px(proposal.t_start),
                    BAR_HEIGHT,
                    PROPOSAL_COLOR,
                    0.8,
                )

    width = int(PLOT_LEFT + PLOT_WIDTH + 20)
    height = int(TOP + num_classes * stride)
    header = PREAMBLE % {
        "video_id": escape(video.video_id),
        "num_snippets": num_snippets,
        "snippet_duration": result.snippet_duration,
        "left": PLOT_LEFT,
        "px_per_second": px_per_second,
        "top": TOP,
        "stride": stride,
        "panel": PANEL_HEIGHT,
        "width": width,
        "height": height,
    }
    return header + "".join(command + "\n" for command in svg.commands) + POSTAMBLE


async def save_tcas_figure(path: str, result: InferenceResult, video: FeatureSequence) -> None:
    await write_file(path, render_tcas(result, video))
