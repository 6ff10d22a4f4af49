"""Helpers for reading the scenario geometry file, which uses a small SUMO-like XML dialect."""

from typing import Iterator

import numpy as np
from lxml import etree
from lxml.etree import QName


class GeometryFileError(ValueError):
    """An error raised when the scenario geometry file is missing data or contains malformed values."""
    pass


def _required(elem: etree.Element, name: str) -> str:
    text = elem.get(name)
    if text is None:
        raise GeometryFileError(f"Element <{QName(elem).localname}> is missing required attribute `{name}`.")
    return text


def parse_float(elem: etree.Element, name: str) -> float:
    """Parse a numeric attribute (meters, m/s or seconds) to a float."""
    value = _required(elem, name)
    try:
        return float(value)
    except ValueError:
        raise GeometryFileError(f"Cannot convert attribute `{name}`='{value}' to a number.")


def parse_shape(elem: etree.Element, name: str = "shape") -> np.ndarray:
    """Parse a SUMO-style shape attribute (`"x1,y1 x2,y2 ..."`, meters) into an (N, 2) array of points.

    :param elem: The XML element carrying the attribute.
    :param name: The attribute name. Defaults to `shape`.
    """
    text = _required(elem, name)
    try:
        points = [tuple(float(c) for c in pair.split(",")) for pair in text.split()]
    except ValueError:
        raise GeometryFileError(f"Malformed shape '{text}'.")
    if len(points) < 2 or any(len(p) != 2 for p in points):
        raise GeometryFileError(f"A shape needs at least two x,y points, got '{text}'.")
    return np.array(points, dtype=np.float64)


def iter_elements(file: str, tag: str) -> Iterator[etree.Element]:
    """Yield each complete `tag` element of an XML file, clearing it once the caller is done with it.

    :param file: Path to the XML file.
    :param tag: Local name of the elements wanted (any namespace).
    :raises GeometryFileError: If the file cannot be read or is not well-formed XML.
    """
    try:
        for _, elem in etree.iterparse(file, tag="{*}" + tag):
            yield elem
            elem.clear()
    except OSError as e:
        raise GeometryFileError(f"Cannot read geometry file {file}: {e}")
    except etree.XMLSyntaxError as e:
        raise GeometryFileError(f"Geometry file {file} is not well-formed XML: {e}")
