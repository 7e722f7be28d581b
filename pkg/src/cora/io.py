"""Line-oriented problem files, TUM-style trajectories, and JSON reports.

Problem files are UTF-8, whitespace-separated, one record per line:

    # comment
    VERTEX_SE2 <id> <x> <y> <theta>
    VERTEX_SE3 <id> <x> <y> <z> <qx> <qy> <qz> <qw>
    VERTEX_XY <id> <x> <y>              (landmark)
    VERTEX_XYZ <id> <x> <y> <z>         (landmark)
    EDGE_SE2 <a> <b> <dx> <dy> <dtheta> <kappa> <tau>
    EDGE_SE3 <a> <b> <dx> <dy> <dz> <qx> <qy> <qz> <qw> <kappa> <tau>
    EDGE_RANGE <a> <b> <dist> <sigma>

Vertex lines carry reference values (ground truth for generated problems); an
optional GT_VERTEX_* block overrides them.  Floats are serialized with 17
significant digits so scalars round-trip exactly; rotation parameters are
recovered by a tiny ulp search so reparsed matrices are bit-stable as well.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .problem import (
    GroundTruth,
    Problem,
    RangeMeasurement,
    RelativePoseMeasurement,
)

__all__ = [
    "ParseError",
    "parse_problem_file",
    "write_problem_file",
    "write_trajectory_tum",
    "parse_trajectory_tum",
    "write_report_json",
    "derive_robot_partition",
    "rot2",
    "quat_to_matrix",
    "matrix_to_quat",
    "yaw_quaternion",
]


class ParseError(ValueError):
    """Malformed problem file; carries the offending line number."""

    def __init__(self, path: str, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# ---------------------------------------------------------------------------
# rotations <-> serialized parameters
# ---------------------------------------------------------------------------


def rot2(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (x, y, z, w), no renormalization."""
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) of a rotation matrix, Shepperd's method."""
    t = np.trace(R)
    if t > 0:
        r = np.sqrt(1.0 + t)
        s = 0.5 / r
        q = np.array(
            [(R[2, 1] - R[1, 2]) * s, (R[0, 2] - R[2, 0]) * s, (R[1, 0] - R[0, 1]) * s, 0.5 * r]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        s = 0.5 / r
        q = np.empty(4)
        q[i] = 0.5 * r
        q[j] = (R[j, i] + R[i, j]) * s
        q[k] = (R[k, i] + R[i, k]) * s
        q[3] = (R[k, j] - R[j, k]) * s
    return q / np.linalg.norm(q)


def _ulp_neighbors(x: float, radius: int):
    yield x
    up = dn = x
    for _ in range(radius):
        up = np.nextafter(up, np.inf)
        dn = np.nextafter(dn, -np.inf)
        yield up
        yield dn


def angle_of_rotation(R: np.ndarray) -> float:
    """2D rotation angle whose reconstruction matches R bitwise when possible."""
    theta = float(np.arctan2(R[1, 0], R[0, 0]))
    for t in _ulp_neighbors(theta, 4):
        if np.array_equal(rot2(t), R):
            return t
    return theta


def quat_of_rotation(R: np.ndarray) -> np.ndarray:
    """Quaternion whose reconstruction matches R bitwise when possible."""
    q0 = matrix_to_quat(R)
    for radius in (1, 2, 3):
        for steps in itertools.product(range(-radius, radius + 1), repeat=4):
            if max(abs(s) for s in steps) != radius and radius > 1:
                continue
            q = q0.copy()
            for axis, step in enumerate(steps):
                for _ in range(abs(step)):
                    q[axis] = np.nextafter(q[axis], np.inf if step > 0 else -np.inf)
            if np.array_equal(quat_to_matrix(q), R):
                return q
    return q0


def yaw_quaternion(theta: float) -> tuple[float, float, float, float]:
    """Quaternion (x, y, z, w) of a planar rotation about z."""
    return (0.0, 0.0, float(np.sin(0.5 * theta)), float(np.cos(0.5 * theta)))


# ---------------------------------------------------------------------------
# problem files
# ---------------------------------------------------------------------------


def derive_robot_partition(pose_ids) -> dict[str, str]:
    """Group poses by the alphabetic prefix of their ids (multi-robot naming).

    Ids like A0..A99, B0.. map pose -> robot by prefix; if any pose id lacks
    an alphabetic prefix the partition is left empty.
    """
    partition: dict[str, str] = {}
    for pid in pose_ids:
        prefix = pid.rstrip("0123456789")
        if not prefix or prefix == pid:
            return {}
        partition[pid] = prefix
    return partition


_VERTEX_TAGS = {
    "VERTEX_SE2": (2, "pose"),
    "VERTEX_SE3": (3, "pose"),
    "VERTEX_XY": (2, "landmark"),
    "VERTEX_XYZ": (3, "landmark"),
}


@dataclass
class _Vertex:
    kind: str
    rotation: np.ndarray | None
    position: np.ndarray


def _parse_vertex(tag: str, fields: list[str], path: str, line_no: int) -> tuple[str, _Vertex]:
    dim, kind = _VERTEX_TAGS[tag]
    expected = {"VERTEX_SE2": 4, "VERTEX_SE3": 8, "VERTEX_XY": 3, "VERTEX_XYZ": 4}[tag]
    if len(fields) != expected:
        raise ParseError(path, line_no, f"{tag} expects {expected} fields, got {len(fields)}")
    name = fields[0]
    try:
        values = [float(f) for f in fields[1:]]
    except ValueError as exc:
        raise ParseError(path, line_no, f"bad float in {tag}: {exc}") from exc
    if tag == "VERTEX_SE2":
        return name, _Vertex(kind, rot2(values[2]), np.array(values[:2]))
    if tag == "VERTEX_SE3":
        return name, _Vertex(kind, quat_to_matrix(np.array(values[3:])), np.array(values[:3]))
    return name, _Vertex(kind, None, np.array(values))


def parse_problem_file(path: str) -> tuple[Problem, GroundTruth | None]:
    """Read a problem and its reference solution from a text file."""
    vertices: dict[str, _Vertex] = {}
    gt_vertices: dict[str, _Vertex] = {}
    pose_ids: list[str] = []
    landmark_ids: list[str] = []
    rel_pose: list[RelativePoseMeasurement] = []
    ranges: list[RangeMeasurement] = []
    dimension: int | None = None

    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            tag, rest = fields[0], fields[1:]

            is_gt = tag.startswith("GT_")
            base_tag = tag[3:] if is_gt else tag

            if base_tag in _VERTEX_TAGS:
                dim = _VERTEX_TAGS[base_tag][0]
                if dimension is None:
                    dimension = dim
                elif dimension != dim:
                    raise ParseError(path, line_no, "mixed 2D and 3D vertices")
                name, vert = _parse_vertex(base_tag, rest, path, line_no)
                target = gt_vertices if is_gt else vertices
                if name in target:
                    raise ParseError(path, line_no, f"duplicate vertex id '{name}'")
                target[name] = vert
                if not is_gt:
                    if vert.kind == "pose":
                        pose_ids.append(name)
                    else:
                        landmark_ids.append(name)
                continue

            if tag in ("EDGE_SE2", "EDGE_SE3"):
                expected = 7 if tag == "EDGE_SE2" else 11
                if len(rest) != expected:
                    raise ParseError(path, line_no, f"{tag} expects {expected} fields")
                a, b = rest[0], rest[1]
                try:
                    values = [float(f) for f in rest[2:]]
                except ValueError as exc:
                    raise ParseError(path, line_no, f"bad float in {tag}: {exc}") from exc
                for vid in (a, b):
                    if vid not in vertices:
                        raise ParseError(path, line_no, f"unknown id in edge: '{vid}'")
                if tag == "EDGE_SE2":
                    rotation = rot2(values[2])
                    translation = np.array(values[:2])
                    kappa, tau = values[3], values[4]
                else:
                    rotation = quat_to_matrix(np.array(values[3:7]))
                    translation = np.array(values[:3])
                    kappa, tau = values[7], values[8]
                rel_pose.append(
                    RelativePoseMeasurement(
                        from_id=a,
                        to_id=b,
                        rotation=rotation,
                        translation=translation,
                        kappa=kappa,
                        tau=tau,
                    )
                )
                continue

            if tag == "EDGE_RANGE":
                if len(rest) != 4:
                    raise ParseError(path, line_no, "EDGE_RANGE expects 4 fields")
                a, b = rest[0], rest[1]
                for vid in (a, b):
                    if vid not in vertices:
                        raise ParseError(path, line_no, f"unknown id in edge: '{vid}'")
                try:
                    dist, sigma = float(rest[2]), float(rest[3])
                except ValueError as exc:
                    raise ParseError(path, line_no, f"bad float in EDGE_RANGE: {exc}") from exc
                ranges.append(RangeMeasurement(from_id=a, to_id=b, distance=dist, sigma=sigma))
                continue

            raise ParseError(path, line_no, f"unknown line tag '{tag}'")

    if dimension is None:
        raise ParseError(path, 0, "file declares no vertices")

    problem = Problem(
        dimension=dimension,
        pose_ids=tuple(pose_ids),
        landmark_ids=tuple(landmark_ids),
        rel_pose_measurements=tuple(rel_pose),
        range_measurements=tuple(ranges),
        robot_partition=derive_robot_partition(pose_ids),
    )

    reference = gt_vertices if gt_vertices else vertices
    try:
        rotations = np.array([reference[pid].rotation for pid in pose_ids])
        translations = np.array([reference[pid].position for pid in pose_ids])
        landmarks = (
            np.array([reference[lid].position for lid in landmark_ids])
            if landmark_ids
            else np.zeros((0, dimension))
        )
    except KeyError:
        return problem, None
    ground_truth = GroundTruth(
        rotations=rotations.reshape(len(pose_ids), dimension, dimension),
        translations=translations.reshape(len(pose_ids), dimension),
        landmarks=landmarks.reshape(len(landmark_ids), dimension),
    )
    return problem, ground_truth


def write_problem_file(
    problem: Problem,
    path: str,
    ground_truth: GroundTruth | None = None,
    header: str | None = None,
) -> None:
    """Inverse of :func:`parse_problem_file`; deterministic line order."""
    d = problem.dimension
    lines: list[str] = []
    if header:
        for h in header.splitlines():
            lines.append(f"# {h}")

    if ground_truth is None:
        ground_truth = GroundTruth(
            rotations=np.tile(np.eye(d), (problem.num_poses, 1, 1)),
            translations=np.zeros((problem.num_poses, d)),
            landmarks=np.zeros((problem.num_landmarks, d)),
        )

    for i, pid in enumerate(problem.pose_ids):
        R = ground_truth.rotations[i]
        t = ground_truth.translations[i]
        if d == 2:
            lines.append(
                f"VERTEX_SE2 {pid} {_fmt(t[0])} {_fmt(t[1])} {_fmt(angle_of_rotation(R))}"
            )
        else:
            q = quat_of_rotation(R)
            lines.append(
                f"VERTEX_SE3 {pid} {_fmt(t[0])} {_fmt(t[1])} {_fmt(t[2])} "
                f"{_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])}"
            )
    for j, lid in enumerate(problem.landmark_ids):
        pos = ground_truth.landmarks[j]
        if d == 2:
            lines.append(f"VERTEX_XY {lid} {_fmt(pos[0])} {_fmt(pos[1])}")
        else:
            lines.append(f"VERTEX_XYZ {lid} {_fmt(pos[0])} {_fmt(pos[1])} {_fmt(pos[2])}")

    for m in problem.rel_pose_measurements:
        t = m.translation
        if d == 2:
            lines.append(
                f"EDGE_SE2 {m.from_id} {m.to_id} {_fmt(t[0])} {_fmt(t[1])} "
                f"{_fmt(angle_of_rotation(m.rotation))} {_fmt(m.kappa)} {_fmt(m.tau)}"
            )
        else:
            q = quat_of_rotation(m.rotation)
            lines.append(
                f"EDGE_SE3 {m.from_id} {m.to_id} {_fmt(t[0])} {_fmt(t[1])} {_fmt(t[2])} "
                f"{_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])} "
                f"{_fmt(m.kappa)} {_fmt(m.tau)}"
            )

    for m in problem.range_measurements:
        lines.append(
            f"EDGE_RANGE {m.from_id} {m.to_id} {_fmt(m.distance)} {_fmt(m.sigma)}"
        )

    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# trajectories and reports
# ---------------------------------------------------------------------------


def write_trajectory_tum(
    path: str, rotations: np.ndarray, translations: np.ndarray
) -> None:
    """Write poses as TUM-style lines: index x y z qx qy qz qw (2D gets z=0)."""
    lines = []
    for i, (R, t) in enumerate(zip(rotations, translations)):
        if t.shape[0] == 2:
            x, y, z = t[0], t[1], 0.0
            q = yaw_quaternion(angle_of_rotation(R))
        else:
            x, y, z = t
            q = tuple(quat_of_rotation(R))
        lines.append(
            f"{i} {_fmt(x)} {_fmt(y)} {_fmt(z)} "
            f"{_fmt(q[0])} {_fmt(q[1])} {_fmt(q[2])} {_fmt(q[3])}"
        )
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def parse_trajectory_tum(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a TUM trajectory; returns (n, 3, 3) rotations and (n, 3) positions."""
    rotations = []
    positions = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ParseError(path, line_no, "trajectory line expects 8 fields")
            vals = [float(f) for f in fields[1:]]
            positions.append(vals[:3])
            rotations.append(quat_to_matrix(np.array(vals[3:])))
    return np.array(rotations), np.array(positions)


def write_report_json(path: str, report) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(report.to_json_dict(), handle, indent=2)
        handle.write("\n")
