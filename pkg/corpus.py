"""
Ground-truth corpus handling.

This module handles:
- PAGE XML parsing (TextLine / Coords / TextEquiv, any schema vintage)
- Line extraction from page images and artificial pages built from line GT
- Balanced per-work selection and cross-fold splits
- The corpus manifest (JSON + 8-bit PNG rasters)
"""

import json
import os
import re
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from lxml import etree

from config import Config
from imgproc import load_raster, save_raster
from utils.exceptions import EmptyInputError, HistOCRError, PageXmlError, RegionBoundsError
from utils.logger import Logger
from utils.seeding import rng_for
from utils.validator import RasterValidator

logger = Logger("corpus")

PAGE_NS = "http://schema.primaresearch.org/PAGE/gts/pagecontent/2019-07-15"

Point = Tuple[int, int]
LineKey = Tuple[str, str, str]


@dataclass(frozen=True)
class LineRegion:
    polygon: Tuple[Point, ...]
    text: str


@dataclass(frozen=True)
class LineSample:
    image: np.ndarray = field(compare=False, repr=False)
    transcription: str
    work_id: str
    page_id: str
    line_id: str
    variant: str = "raw"
    selected: bool = False

    @property
    def key(self) -> LineKey:
        return (self.work_id, self.page_id, self.line_id)

    def validate(self) -> None:
        ok, message = RasterValidator.validate_raster(self.image)
        if not ok:
            raise HistOCRError(f"line {self.key}: {message}")
        text = self.transcription
        if text != text.strip() or re.search(r"\s\s", text):
            raise HistOCRError(f"line {self.key}: transcription not whitespace-normalized")


@dataclass
class WorkEntry:
    work_id: str
    tags: Dict[str, str] = field(default_factory=dict)
    lines: List[LineSample] = field(default_factory=list)


@dataclass
class Corpus:
    works: List[WorkEntry] = field(default_factory=list)

    @classmethod
    def from_lines(cls, lines: Iterable[LineSample], tags: Optional[Dict[str, Dict[str, str]]] = None) -> "Corpus":
        works: "OrderedDict[str, WorkEntry]" = OrderedDict()
        for line in lines:
            if line.work_id not in works:
                works[line.work_id] = WorkEntry(line.work_id, dict((tags or {}).get(line.work_id, {})))
            works[line.work_id].lines.append(line)
        return cls(list(works.values()))

    def lines(self, selected_only: bool = False) -> List[LineSample]:
        return [
            line
            for work in self.works
            for line in work.lines
            if line.selected or not selected_only
        ]

    def line_groups(self, selected_only: bool = False) -> "OrderedDict[LineKey, List[LineSample]]":
        """Variants of the same (work, page, line), in corpus order."""
        groups: "OrderedDict[LineKey, List[LineSample]]" = OrderedDict()
        for line in self.lines(selected_only):
            groups.setdefault(line.key, []).append(line)
        return groups

    def work_tags(self) -> Dict[str, Dict[str, str]]:
        return {w.work_id: dict(w.tags) for w in self.works}

    def subset(self, keys: Iterable[LineKey]) -> "Corpus":
        wanted = set(keys)
        return Corpus.from_lines(
            (l for l in self.lines() if l.key in wanted), self.work_tags()
        )

    def validate(self, cap: Optional[int] = None) -> None:
        seen = set()
        for work in self.works:
            for line in work.lines:
                quad = (*line.key, line.variant)
                if quad in seen:
                    raise HistOCRError(f"duplicate line {quad}")
                seen.add(quad)
                line.validate()
            if cap is not None:
                selected = {l.key for l in work.lines if l.selected}
                if len(selected) > cap:
                    raise HistOCRError(
                        f"work {work.work_id}: {len(selected)} selected lines exceed cap {cap}"
                    )

    def __len__(self) -> int:
        return sum(len(w.lines) for w in self.works)


# ---------------------------------------------------------------- PAGE XML


def _local(el) -> str:
    return etree.QName(el).localname


def _children(el, name: str):
    return [c for c in el if isinstance(c.tag, str) and _local(c) == name]


def _parse_points(coords) -> List[Point]:
    points_attr = coords.get("points")
    if points_attr is not None:
        points = []
        for pair in points_attr.split():
            x, y = pair.split(",")
            points.append((int(round(float(x))), int(round(float(y)))))
        return points
    # pre-2013 vintage
    return [(int(p.get("x")), int(p.get("y"))) for p in _children(coords, "Point")]


def _line_text(text_line) -> Optional[str]:
    equivs = _children(text_line, "TextEquiv")
    if not equivs:
        return None

    def order(item):
        position, el = item
        index = el.get("index")
        return (int(index) if index is not None and index.lstrip("-").isdigit() else 1 << 30, position)

    _, best = min(enumerate(equivs), key=order)
    unicode_el = _children(best, "Unicode")
    if not unicode_el or not unicode_el[0].text:
        return None
    return unicode_el[0].text


def _parse_root(xml):
    data = xml.encode("utf-8") if isinstance(xml, str) else xml
    parser = etree.XMLParser(resolve_entities=False, no_network=True, remove_comments=True)
    try:
        return etree.fromstring(data, parser)
    except etree.XMLSyntaxError as e:
        line, column = e.position
        raise PageXmlError(f"malformed PAGE XML: {e.msg}", line, column)


def parse_page_xml(xml, page_image: Optional[np.ndarray] = None) -> Tuple[List[LineRegion], List[str]]:
    """One region per complete TextLine, in document order, plus warnings for skipped lines."""
    root = _parse_root(xml)
    height, width = page_image.shape[:2] if page_image is not None else (None, None)

    regions: List[LineRegion] = []
    warnings: List[str] = []
    for number, text_line in enumerate(
        (el for el in root.iter() if isinstance(el.tag, str) and _local(el) == "TextLine"),
        start=1,
    ):
        name = text_line.get("id") or f"TextLine #{number}"
        coords = _children(text_line, "Coords")
        if not coords:
            warnings.append(f"{name}: missing coordinates")
            continue
        try:
            polygon = _parse_points(coords[0])
        except (TypeError, ValueError):
            warnings.append(f"{name}: unreadable coordinates")
            continue
        if len(polygon) < 3:
            warnings.append(f"{name}: polygon has fewer than 3 points")
            continue
        text = _line_text(text_line)
        if text is None:
            warnings.append(f"{name}: missing transcription")
            continue
        if width is not None:
            outside = [p for p in polygon if not (0 <= p[0] < width and 0 <= p[1] < height)]
            if outside:
                warnings.append(f"{name}: point {outside[0]} outside page {width}x{height}")
                continue
        regions.append(LineRegion(tuple(polygon), text))

    for message in warnings:
        logger.warning(message)
    return regions, warnings


def page_image_filename(xml) -> Optional[str]:
    root = _parse_root(xml)
    for el in root.iter():
        if isinstance(el.tag, str) and _local(el) == "Page":
            return el.get("imageFilename")
    return None


def write_page_xml(regions: Sequence[LineRegion], image_filename: str, width: int, height: int) -> str:
    """Minimal PAGE document with one text region holding every line."""
    nsmap = {None: PAGE_NS}
    root = etree.Element(f"{{{PAGE_NS}}}PcGts", nsmap=nsmap)
    metadata = etree.SubElement(root, f"{{{PAGE_NS}}}Metadata")
    etree.SubElement(metadata, f"{{{PAGE_NS}}}Creator").text = "histocr"
    page = etree.SubElement(
        root,
        f"{{{PAGE_NS}}}Page",
        imageFilename=image_filename,
        imageWidth=str(width),
        imageHeight=str(height),
    )
    block = etree.SubElement(page, f"{{{PAGE_NS}}}TextRegion", id="r0")
    etree.SubElement(
        block, f"{{{PAGE_NS}}}Coords", points=f"0,0 {width - 1},0 {width - 1},{height - 1} 0,{height - 1}"
    )
    for i, region in enumerate(regions):
        line = etree.SubElement(block, f"{{{PAGE_NS}}}TextLine", id=f"r0_l{i}")
        etree.SubElement(
            line, f"{{{PAGE_NS}}}Coords", points=" ".join(f"{x},{y}" for x, y in region.polygon)
        )
        equiv = etree.SubElement(line, f"{{{PAGE_NS}}}TextEquiv")
        etree.SubElement(equiv, f"{{{PAGE_NS}}}Unicode").text = region.text
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding="UTF-8").decode("utf-8")


# ------------------------------------------------------ line geometry


def polygon_mask(polygon: Sequence[Point], x0: int, y0: int, width: int, height: int) -> np.ndarray:
    """Pixels (integer coordinates) inside the polygon or on its boundary."""
    ys, xs = np.mgrid[y0 : y0 + height, x0 : x0 + width].astype(np.float64)
    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    points = list(polygon)
    for (x1, y1), (x2, y2) in zip(points, points[1:] + points[:1]):
        cross = (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1)
        on_edge |= (
            (cross == 0)
            & (xs >= min(x1, x2))
            & (xs <= max(x1, x2))
            & (ys >= min(y1, y2))
            & (ys <= max(y1, y2))
        )
        if y1 != y2:
            crosses = (y1 > ys) != (y2 > ys)
            x_at = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (xs < x_at)
    return inside | on_edge


def extract_line(page_image: np.ndarray, region: LineRegion) -> np.ndarray:
    """Crop to the polygon's bounding box; pixels outside the polygon become white."""
    height, width = page_image.shape[:2]
    for point in region.polygon:
        if not (0 <= point[0] < width and 0 <= point[1] < height):
            raise RegionBoundsError(point, width, height)
    xs = [p[0] for p in region.polygon]
    ys = [p[1] for p in region.polygon]
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    crop = np.array(page_image[y0 : y1 + 1, x0 : x1 + 1], dtype=np.float64)
    mask = polygon_mask(region.polygon, x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    crop[~mask] = 1.0
    return crop


def concat_lines_to_page(lines: Sequence[LineSample], gap: int = 0) -> Tuple[np.ndarray, List[LineRegion]]:
    """Stack line rasters vertically into an artificial page."""
    if not lines:
        raise EmptyInputError("cannot build a page from an empty line list")
    if gap < 0:
        raise ValueError(f"gap must be >= 0, got {gap}")
    variants = {l.variant for l in lines}
    if len(variants) != 1:
        raise HistOCRError(f"lines of one page must share a variant, got {sorted(variants)}")

    width = max(l.image.shape[1] for l in lines)
    height = sum(l.image.shape[0] for l in lines) + gap * (len(lines) - 1)
    page = np.ones((height, width), dtype=np.float64)
    regions = []
    y = 0
    for line in lines:
        h, w = line.image.shape
        page[y : y + h, :w] = line.image
        regions.append(
            LineRegion(((0, y), (w - 1, y), (w - 1, y + h - 1), (0, y + h - 1)), line.transcription)
        )
        y += h + gap
    return page, regions


# --------------------------------------------------- selection and folds


def select_balanced(corpus: Corpus, cap: int = Config.DEFAULT_BALANCE_CAP, seed: int = 0) -> Corpus:
    """Flag up to ``cap`` lines per work; the choice depends only on (seed, work_id)."""
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    works = []
    for work in corpus.works:
        keys = sorted({l.key for l in work.lines})
        if len(keys) <= cap:
            chosen = set(keys)
        else:
            picks = rng_for("balance", seed, work.work_id).choice(len(keys), size=cap, replace=False)
            chosen = {keys[i] for i in picks}
        works.append(
            WorkEntry(
                work.work_id,
                dict(work.tags),
                [replace(l, selected=l.key in chosen) for l in work.lines],
            )
        )
        logger.info(f"work {work.work_id}: {len(chosen)} of {len(keys)} lines selected")
    return Corpus(works)


def split_folds(samples: Sequence, k: int, seed: int) -> List[Tuple[list, list]]:
    """k (train, validation) pairs; validation shards partition a seeded shuffle."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(samples) < k:
        raise EmptyInputError(f"need at least {k} samples for {k} folds, got {len(samples)}")
    order = rng_for("folds", seed).permutation(len(samples))
    # array_split puts the remainder on the earliest shards
    shards = np.array_split(order, k)
    folds = []
    for shard in shards:
        in_val = set(int(i) for i in shard)
        val = [samples[int(i)] for i in shard]
        train = [s for i, s in enumerate(samples) if i not in in_val]
        folds.append((train, val))
    return folds


def split_corpus(corpus: Corpus, fractions: Sequence[float], seed: int) -> List[Corpus]:
    """Split line groups per work by fractions (largest remainder), deterministic in seed."""
    total = float(sum(fractions))
    parts: List[List[LineKey]] = [[] for _ in fractions]
    for work in corpus.works:
        keys = sorted({l.key for l in work.lines})
        order = rng_for("split", seed, work.work_id).permutation(len(keys))
        counts = largest_remainder([f / total * len(keys) for f in fractions], len(keys))
        start = 0
        for part, count in zip(parts, counts):
            part.extend(keys[int(i)] for i in order[start : start + count])
            start += count
    return [corpus.subset(keys) for keys in parts]


def largest_remainder(quotas: Sequence[float], total: int) -> List[int]:
    """Integer counts summing to ``total``; integral quotas are kept exactly."""
    # tolerance absorbs float error in quotas such as 0.9 * 1000
    counts = [int(np.floor(q + 1e-9)) for q in quotas]
    remainders = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in remainders[: total - sum(counts)]:
        counts[i] += 1
    return counts


# ------------------------------------------------------------ manifest IO


def _safe_name(name: str) -> str:
    name = re.sub(r"[^a-zA-Z0-9._-]", "_", name.strip())
    return re.sub(r"_+", "_", name).strip("_") or "_"


def save_corpus(corpus: Corpus, out_dir: str, manifest_name: str = "manifest.json") -> str:
    """Write PNG rasters and the JSON manifest; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    works_json = []
    for work in corpus.works:
        pages: "OrderedDict[str, list]" = OrderedDict()
        for line in work.lines:
            rel = os.path.join(
                "lines",
                _safe_name(work.work_id),
                _safe_name(line.page_id),
                f"{_safe_name(line.line_id)}.{line.variant}.png",
            )
            os.makedirs(os.path.join(out_dir, os.path.dirname(rel)), exist_ok=True)
            save_raster(line.image, os.path.join(out_dir, rel))
            pages.setdefault(line.page_id, []).append(
                {
                    "line_id": line.line_id,
                    "variant": line.variant,
                    "image": rel.replace(os.sep, "/"),
                    "text": line.transcription,
                    "selected": line.selected,
                }
            )
        works_json.append(
            {
                "work_id": work.work_id,
                "tags": work.tags,
                "pages": [{"page_id": pid, "lines": ls} for pid, ls in pages.items()],
            }
        )
    path = os.path.join(out_dir, manifest_name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"format": Config.CORPUS_FORMAT, "works": works_json}, f, ensure_ascii=False, indent=1)
    logger.info(f"wrote {len(corpus)} lines to {path}")
    return path


def load_corpus(manifest_path: str) -> Corpus:
    with open(manifest_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if data.get("format") != Config.CORPUS_FORMAT:
        raise HistOCRError(f"{manifest_path}: not a {Config.CORPUS_FORMAT} manifest")
    base = os.path.dirname(os.path.abspath(manifest_path))
    works = []
    for work in data["works"]:
        lines = []
        for page in work["pages"]:
            for entry in page["lines"]:
                lines.append(
                    LineSample(
                        image=load_raster(os.path.join(base, entry["image"])),
                        transcription=entry["text"],
                        work_id=work["work_id"],
                        page_id=page["page_id"],
                        line_id=entry["line_id"],
                        variant=entry.get("variant", "raw"),
                        selected=bool(entry.get("selected", False)),
                    )
                )
        works.append(WorkEntry(work["work_id"], dict(work.get("tags", {})), lines))
    corpus = Corpus(works)
    corpus.validate()
    return corpus
