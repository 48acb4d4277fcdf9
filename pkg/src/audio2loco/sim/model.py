"""Planar articulated bodies and their rigid-body dynamics.

Generalised coordinates are ``[x, z, pitch, q_1..q_J]`` for a floating base
and ``[q_1..q_J]`` for a fixed base. Every link is a rod: a point mass at its
centre plus rotational inertia ``m l^2 / 12``. Link ``k`` has absolute angle
``psi_k`` and points along ``u(psi) = (sin psi, -cos psi)``, so zero angles
hang straight down. The mass matrix is assembled from point Jacobians and
the velocity-product term from ``dJ/dt qdot = -sum l u(psi) psi_dot^2``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError


@dataclass
class Link:
    name: str
    length: float
    mass: float
    parent: int = -1  # -1 attaches to the base
    joint: int | None = None  # actuated joint index, None for a rigid attachment
    offset_angle: float = 0.0


@dataclass
class Joint:
    name: str
    lower: float
    upper: float
    torque_limit: float
    velocity_limit: float = 10.0


@dataclass
class BodyModel:
    name: str
    links: list
    joints: list
    feet: list = field(default_factory=list)  # link indices whose far end touches the ground
    floating_base: bool = False
    gravity: float = 9.81
    ground_height: float | None = None
    base_height: float = 0.0  # fixed-base anchor height, or nominal standing height
    com_link: int = 0  # link whose centre shifts with the randomised CoM offset
    vr_links: list = field(default_factory=list)  # head/hand proxies for the sparse-point reward

    def __post_init__(self):
        self.links = [l if isinstance(l, Link) else Link(**l) for l in self.links]
        self.joints = [j if isinstance(j, Joint) else Joint(**j) for j in self.joints]
        self.validate()
        self._build()

    def validate(self):
        if not self.links or not self.joints:
            raise ConfigError("body", "a body needs at least one link and one joint")
        used = []
        for k, link in enumerate(self.links):
            if link.mass <= 0 or link.length <= 0:
                raise ConfigError(f"body.links[{k}]", "mass and length must be positive")
            if not -1 <= link.parent < k:
                raise ConfigError(f"body.links[{k}].parent", "parents must precede their children")
            if link.joint is not None:
                used.append(link.joint)
        if sorted(used) != list(range(len(self.joints))):
            raise ConfigError("body.joints", "every joint must drive exactly one link")
        for j, jt in enumerate(self.joints):
            if not (math.isfinite(jt.lower) and math.isfinite(jt.upper) and jt.lower < jt.upper):
                raise ConfigError(f"body.joints[{j}]", "hard limits must be finite with lower < upper")
            if jt.torque_limit <= 0:
                raise ConfigError(f"body.joints[{j}].torque_limit", "must be positive")
            if jt.velocity_limit <= 0:
                raise ConfigError(f"body.joints[{j}].velocity_limit", "must be positive")
        for f in self.feet:
            if not 0 <= f < len(self.links):
                raise ConfigError("body.feet", f"foot link {f} out of range")
        for k in self.vr_links:
            if not 0 <= k < len(self.links):
                raise ConfigError("body.vr_links", f"link {k} out of range")
        if self.feet and self.ground_height is None:
            raise ConfigError("body.ground_height", "feet need a ground")

    def _build(self):
        L, J = len(self.links), len(self.joints)
        self.n_links, self.n_joints = L, J
        self.base_dofs = 3 if self.floating_base else 0
        self.n_coords = self.base_dofs + J
        # chain[k, i] = 1 when coordinate i rotates link k
        chain = np.zeros((L, self.n_coords))
        for k, link in enumerate(self.links):
            if link.parent >= 0:
                chain[k] = chain[link.parent]
            elif self.floating_base:
                chain[k, 2] = 1.0
            if link.joint is not None:
                chain[k, self.base_dofs + link.joint] = 1.0
        self.chain = chain
        offsets = np.zeros(L)
        for k, link in enumerate(self.links):
            offsets[k] = link.offset_angle + (offsets[link.parent] if link.parent >= 0 else 0.0)
        self.angle_offsets = offsets
        self.lengths = np.array([l.length for l in self.links])
        self.masses = np.array([l.mass for l in self.links])
        self.inertias = self.masses * self.lengths**2 / 12.0
        self.lower = np.array([j.lower for j in self.joints])
        self.upper = np.array([j.upper for j in self.joints])
        self.torque_limit = np.array([j.torque_limit for j in self.joints])
        self.velocity_limit = np.array([j.velocity_limit for j in self.joints])
        # default proxy: torso top when floating, the distal tip otherwise
        self.vr_index = list(self.vr_links) or ([0] if self.floating_base else [L - 1])

    # -- IO ----------------------------------------------------------------

    def to_dict(self):
        return {
            "name": self.name,
            "floating_base": self.floating_base,
            "gravity": self.gravity,
            "ground_height": self.ground_height,
            "base_height": self.base_height,
            "com_link": self.com_link,
            "links": [asdict(l) for l in self.links],
            "joints": [asdict(j) for j in self.joints],
            "feet": list(self.feet),
            "vr_links": list(self.vr_links),
        }

    @classmethod
    def from_dict(cls, d):
        known = {"name", "floating_base", "gravity", "ground_height", "base_height", "com_link", "links", "joints", "feet",
                 "vr_links"}
        extra = set(d) - known
        if extra:
            raise ConfigError("body", f"unknown keys {sorted(extra)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    # -- coordinates -------------------------------------------------------

    def coords(self, q, root_pos=None, root_pitch=None):
        """Stack joint angles (and root pose) into generalised coordinates."""
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if not self.floating_base:
            return q.copy()
        E = q.shape[0]
        rp = np.zeros((E, 2)) if root_pos is None else np.atleast_2d(root_pos)
        pitch = np.zeros(E) if root_pitch is None else np.asarray(root_pitch, dtype=np.float64).reshape(E)
        return np.concatenate([rp, pitch[:, None], q], axis=1)

    def joint_part(self, g):
        return g[..., self.base_dofs :]

    def root_pose(self, g):
        """``(x, z, pitch)`` per row; constant anchor for a fixed base."""
        g = np.atleast_2d(g)
        if self.floating_base:
            return g[:, 0], g[:, 1], g[:, 2]
        E = g.shape[0]
        return np.zeros(E), np.full(E, self.base_height), np.zeros(E)


def direction(psi):
    return np.stack([np.sin(psi), -np.cos(psi)], axis=-1)


def direction_deriv(psi):
    return np.stack([np.cos(psi), np.sin(psi)], axis=-1)


@dataclass
class Kinematics:
    psi: np.ndarray  # (E, L)
    psi_dot: np.ndarray  # (E, L)
    start: np.ndarray  # (E, L, 2)
    end: np.ndarray  # (E, L, 2)
    com: np.ndarray  # (E, L, 2)
    J_end: np.ndarray  # (E, L, 2, n)
    J_com: np.ndarray  # (E, L, 2, n)
    bias_end: np.ndarray  # (E, L, 2) dJ/dt qdot
    bias_com: np.ndarray  # (E, L, 2)
    v_end: np.ndarray  # (E, L, 2)
    v_com: np.ndarray  # (E, L, 2)


def kinematics(model, g, gd, com_offset=None):
    """Positions, velocities and Jacobians of every link for a batch of states."""
    g = np.atleast_2d(g)
    gd = np.atleast_2d(gd)
    E, n = g.shape
    L = model.n_links
    psi = model.angle_offsets[None, :] + g @ model.chain.T
    psi_dot = gd @ model.chain.T
    u = direction(psi)
    du = direction_deriv(psi)
    start = np.zeros((E, L, 2))
    end = np.zeros((E, L, 2))
    com = np.zeros((E, L, 2))
    J_end = np.zeros((E, L, 2, n))
    J_com = np.zeros((E, L, 2, n))
    b_end = np.zeros((E, L, 2))
    b_com = np.zeros((E, L, 2))
    x, z, _ = model.root_pose(g)
    base = np.stack([x, z], axis=1)
    J_base = np.zeros((E, 2, n))
    if model.floating_base:
        J_base[:, 0, 0] = 1.0
        J_base[:, 1, 1] = 1.0
    for k, link in enumerate(model.links):
        if link.parent >= 0:
            s, Js, bs = end[:, link.parent], J_end[:, link.parent], b_end[:, link.parent]
        else:
            s, Js, bs = base, J_base, np.zeros((E, 2))
        start[:, k] = s
        lk = model.lengths[k]
        c_along = 0.5 * lk
        if com_offset is not None and k == model.com_link:
            c_along = c_along + np.asarray(com_offset, dtype=np.float64).reshape(E, 1)
        row = model.chain[k][None, None, :]
        end[:, k] = s + lk * u[:, k]
        com[:, k] = s + c_along * u[:, k]
        J_end[:, k] = Js + lk * du[:, k, :, None] * row
        J_com[:, k] = Js + np.reshape(c_along, (-1, 1, 1)) * du[:, k, :, None] * row
        w2 = psi_dot[:, k : k + 1] ** 2
        b_end[:, k] = bs - lk * u[:, k] * w2
        b_com[:, k] = bs - c_along * u[:, k] * w2
    v_end = np.einsum("elij,ej->eli", J_end, gd)
    v_com = np.einsum("elij,ej->eli", J_com, gd)
    return Kinematics(psi, psi_dot, start, end, com, J_end, J_com, b_end, b_com, v_end, v_com)


def mass_matrix(model, kin, mass_scale=None):
    m = model.masses[None, :] * (1.0 if mass_scale is None else np.asarray(mass_scale).reshape(-1, 1))
    I = model.inertias[None, :] * (1.0 if mass_scale is None else np.asarray(mass_scale).reshape(-1, 1))
    M = np.einsum("el,elki,elkj->eij", m, kin.J_com, kin.J_com)
    M = M + np.einsum("el,li,lj->eij", I, model.chain, model.chain)
    return M, m


def passive_forces(model, kin, m):
    """Gravity minus velocity-product terms, in generalised coordinates."""
    grav = np.array([0.0, -model.gravity])
    acc = grav[None, None, :] - kin.bias_com
    return np.einsum("el,elki,elk->ei", m, kin.J_com, acc)


def mechanical_energy(model, g, gd, mass_scale=None):
    kin = kinematics(model, g, gd)
    M, m = mass_matrix(model, kin, mass_scale)
    ke = 0.5 * np.einsum("ei,eij,ej->e", np.atleast_2d(gd), M, np.atleast_2d(gd))
    pe = model.gravity * np.sum(m * kin.com[:, :, 1], axis=1)
    return ke + pe


def keypoints(model, g):
    """Far end of every link, ``(E, L, 2)``."""
    g = np.atleast_2d(g)
    return kinematics(model, g, np.zeros_like(g)).end


def chain_model(n_joints=3, length=0.3, mass=0.5, limit=2.0, torque_limit=20.0, anchor_height=2.0):
    """Fixed-base pendulum chain hanging from an anchor."""
    links = [Link(f"link{k}", length, mass, parent=k - 1, joint=k) for k in range(n_joints)]
    joints = [Joint(f"joint{k}", -limit, limit, torque_limit) for k in range(n_joints)]
    return BodyModel("chain", links, joints, floating_base=False, base_height=anchor_height)


def biped_model():
    """Floating planar biped (about 6 kg): torso above the hip, two legs of thigh + shin."""
    links = [
        Link("torso", 0.5, 3.0, parent=-1, joint=None, offset_angle=math.pi),
        Link("thigh_l", 0.45, 1.0, parent=-1, joint=0),
        Link("shin_l", 0.45, 0.5, parent=1, joint=1),
        Link("thigh_r", 0.45, 1.0, parent=-1, joint=2),
        Link("shin_r", 0.45, 0.5, parent=3, joint=3),
    ]
    joints = [
        Joint("hip_l", -1.5, 1.5, 30.0),
        Joint("knee_l", -2.4, 0.0, 30.0),
        Joint("hip_r", -1.5, 1.5, 30.0),
        Joint("knee_r", -2.4, 0.0, 30.0),
    ]
    return BodyModel("biped", links, joints, feet=[2, 4], floating_base=True, ground_height=0.0, base_height=0.9)


BUILTIN_BODIES = {"chain": chain_model, "biped": biped_model}


def body_from_spec(spec):
    """``"chain"``, ``"biped"`` or a path to a JSON body file."""
    if spec in BUILTIN_BODIES:
        return BUILTIN_BODIES[spec]()
    path = Path(spec)
    if not path.exists():
        raise ConfigError("env.body", f"unknown body {spec!r} (not a builtin and no such file)")
    return BodyModel.load(path)
