"""PASCAL VOC XML annotations (the subset used here: object name + bndbox)."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from xml.parsers import expat
from dataclasses import dataclass, field

from .boxes import CLASS_INDEX


class VOCParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Annotation:
    name: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    @property
    def class_id(self) -> int:
        return CLASS_INDEX[self.name]

    def corners(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass
class VOCRecord:
    filename: str = ""
    width: int = 0
    height: int = 0
    depth: int = 1
    objects: list[Annotation] = field(default_factory=list)


def _parse_with_lines(text: str) -> tuple[ET.Element, dict[int, int]]:
    """Build an element tree with expat, remembering each element's start line."""
    builder = ET.TreeBuilder()
    lines: dict[int, int] = {}
    parser = expat.ParserCreate()

    def start(tag, attrs):
        lines[id(builder.start(tag, attrs))] = parser.CurrentLineNumber

    parser.StartElementHandler = start
    parser.EndElementHandler = builder.end
    parser.CharacterDataHandler = builder.data
    try:
        parser.Parse(text, True)
    except expat.ExpatError as exc:
        raise VOCParseError(f"malformed XML ({expat.errors.messages[exc.code]})", exc.lineno) from None
    return builder.close(), lines


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def emit_voc(record: VOCRecord) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = record.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = str(record.depth)
    for obj in record.objects:
        o = ET.SubElement(root, "object")
        ET.SubElement(o, "name").text = obj.name
        ET.SubElement(o, "difficult").text = "0"
        bb = ET.SubElement(o, "bndbox")
        for key in ("xmin", "ymin", "xmax", "ymax"):
            ET.SubElement(bb, key).text = _fmt(getattr(obj, key))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def parse_voc(text: str) -> VOCRecord:
    """Parse a VOC annotation; raises :class:`VOCParseError` with the offending line."""
    root, lines = _parse_with_lines(text)
    line = lambda e: lines.get(id(e))  # noqa: E731
    if root.tag != "annotation":
        raise VOCParseError(f"root element is <{root.tag}>, expected <annotation>", line(root))

    def number(parent, tag, cast=float):
        node = parent.find(tag)
        if node is None or node.text is None:
            raise VOCParseError(f"missing <{tag}>", line(parent))
        try:
            return cast(node.text.strip())
        except ValueError:
            raise VOCParseError(f"<{tag}> is not a number: {node.text!r}", line(node)) from None

    rec = VOCRecord(filename=(root.findtext("filename") or "").strip())
    size = root.find("size")
    if size is not None:
        rec.width = number(size, "width", int)
        rec.height = number(size, "height", int)
        depth = size.find("depth")
        rec.depth = int(depth.text) if depth is not None and depth.text else 1
    for obj in root.findall("object"):
        name = (obj.findtext("name") or "").strip()
        if not name:
            raise VOCParseError("object without <name>", line(obj))
        if name not in CLASS_INDEX:
            raise VOCParseError(f"unknown class {name!r}", line(obj))
        bb = obj.find("bndbox")
        if bb is None:
            raise VOCParseError("object without <bndbox>", line(obj))
        xmin, ymin, xmax, ymax = (number(bb, k) for k in ("xmin", "ymin", "xmax", "ymax"))
        if not (xmin < xmax and ymin < ymax):
            raise VOCParseError(f"inverted box ({xmin}, {ymin}, {xmax}, {ymax})", line(bb))
        rec.objects.append(Annotation(name, xmin, ymin, xmax, ymax))
    return rec
