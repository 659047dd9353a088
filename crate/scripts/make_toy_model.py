#!/usr/bin/env python3
"""Writes the bundled toy body model (N=64, J=8, B=4) as JSON.

Each joint carries a small cube of 8 vertices centred on its rest position.
Usage: python3 scripts/make_toy_model.py > crates/core/assets/toy_body.json
"""
import itertools
import json

NAMES = ["pelvis", "l_hip", "l_knee", "r_hip", "r_knee", "spine", "l_shoulder", "r_shoulder"]
PARENTS = [-1, 0, 1, 0, 3, 0, 5, 5]
REST = [
    (0.0, 0.0, 0.0),
    (0.1, -0.05, 0.0),
    (0.12, -0.5, 0.0),
    (-0.1, -0.05, 0.0),
    (-0.12, -0.5, 0.0),
    (0.0, 0.4, 0.0),
    (0.2, 0.45, 0.0),
    (-0.2, 0.45, 0.0),
]
HALF = 0.04
J = len(REST)
N = 8 * J
B = 4

corners = list(itertools.product((-1.0, 1.0), repeat=3))

template = []
for c in REST:
    for o in corners:
        template.append([c[k] + HALF * o[k] for k in range(3)])

# shape_dirs[n][k][b]
dirs = [[[0.0] * B for _ in range(3)] for _ in range(N)]
for n, v in enumerate(template):
    j = n // 8
    o = corners[n % 8]
    dirs[n][1][0] = 0.1 * v[1]  # vertical scale
    dirs[n][0][1] = 0.1 * v[0]  # lateral scale
    for k in range(3):
        dirs[n][k][2] = 0.02 * o[k]  # cube inflation, centres fixed
    if NAMES[j] in ("l_knee", "r_knee"):
        dirs[n][1][3] = -0.05  # leg length
shape_dirs = [dirs[n][k][b] for n in range(N) for k in range(3) for b in range(B)]

joint_regressor = [[(1.0 / 8.0 if n // 8 == j else 0.0) for n in range(N)] for j in range(J)]

skin_weights = []
for n in range(N):
    j = n // 8
    row = [0.0] * J
    if PARENTS[j] < 0:
        row[j] = 1.0
    else:
        row[j] = 0.7
        row[PARENTS[j]] = 0.3
    skin_weights.append(row)

# two triangles per cube side, outward winding
QUADS = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
faces = []
for j in range(J):
    b = 8 * j
    for a, c, d, e in QUADS:
        faces.append([b + a, b + c, b + d])
        faces.append([b + a, b + d, b + e])

model = {
    "version": 1,
    "N": N,
    "J": J,
    "B": B,
    "joint_names": NAMES,
    "template": template,
    "shape_dirs": shape_dirs,
    "joint_regressor": joint_regressor,
    "parents": PARENTS,
    "skin_weights": skin_weights,
    "faces": faces,
}
print(json.dumps(model))
