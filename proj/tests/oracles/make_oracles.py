"""Regenerates tests/oracles/oracle_values.hpp from independent numpy evaluations.

Run: python3 tests/oracles/make_oracles.py > tests/oracles/oracle_values.hpp
"""
import math
import struct

import numpy as np

rng = np.random.default_rng(20240611)
out = []


def emit(name, value):
    out.append(f"inline constexpr double {name} = {float(value)!r};")


def emit_array(name, values):
    body = ", ".join(repr(float(v)) for v in np.ravel(values))
    out.append(f"inline constexpr double {name}[] = {{{body}}};")


def emit_mask(name, values):
    body = ", ".join(str(int(v)) for v in np.ravel(values))
    out.append(f"inline constexpr int {name}[] = {{{body}}};")


def normal(c, mu, s):
    return math.exp(-0.5 * ((c - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))


# Mixture density.
emit("kMixtureValue", 0.7 * normal(0.5, 0.9, 0.25) + 0.3 * 0.5)
emit("kGaussianPeak", 1.0 / (0.2 * math.sqrt(2 * math.pi)))

# Rodrigues for pi/2 about z.
th = math.pi / 2
K = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 0]], float)
R = np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K
emit_array("kRotZ90", R)

# PFM bytes of the 2x2 map [[1, 2], [3, 4]]; rows stored bottom-to-top.
pfm = b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 3.0, 4.0, 1.0, 2.0)
out.append("inline constexpr unsigned char kPfmBytes[] = {" + ", ".join(str(b) for b in pfm) + "};")

# Depth and demon metrics on random 4x5 maps with a few invalid pixels.
rows, cols = 4, 5
gt = rng.uniform(2.0, 20.0, (rows, cols))
est = gt * rng.uniform(0.6, 1.5, (rows, cols))
valid_gt = (rng.uniform(size=(rows, cols)) > 0.15).astype(int)
valid_est = (rng.uniform(size=(rows, cols)) > 0.15).astype(int)
emit_array("kMetricGt", gt)
emit_array("kMetricEst", est)
emit_mask("kMetricGtValid", valid_gt)
emit_mask("kMetricEstValid", valid_est)
joint = (valid_gt & valid_est).astype(bool)
g, e = gt[joint], est[joint]
alpha = float(np.median(g / e))
emit("kMetricScale", alpha)
for suffix, s in (("Raw", 1.0), ("Aligned", alpha)):
    d = s * e
    ratio = np.maximum(d / g, g / d)
    emit(f"kAbsRel{suffix}", np.mean(np.abs(d - g) / g))
    emit(f"kSqRel{suffix}", np.mean((d - g) ** 2 / g))
    emit(f"kRmse{suffix}", math.sqrt(np.mean((d - g) ** 2)))
    emit(f"kRmseLog{suffix}", math.sqrt(np.mean((np.log(d) - np.log(g)) ** 2)))
    emit(f"kDelta1{suffix}", np.mean(ratio < 1.25))
    emit(f"kDelta2{suffix}", np.mean(ratio < 1.25**2))
    emit(f"kDelta3{suffix}", np.mean(ratio < 1.25**3))
z = np.log(e) - np.log(g)
emit("kL1Inv", np.mean(np.abs(1 / e - 1 / g)))
emit("kScInv", math.sqrt(np.mean(z**2) - np.mean(z) ** 2))
emit("kL1Rel", np.mean(np.abs(e - g) / g))

# Regression loss for one iterate on a 2x2 map.
gt2 = np.array([[4.0, 5.0], [6.0, 8.0]])
est2 = np.array([[2.0, 2.4], [3.3, 4.1]])
a2 = float(np.median(gt2 / est2))
rv = np.array([0.01, -0.02, 0.03])
th = np.linalg.norm(rv)
Kx = np.array([[0, -rv[2], rv[1]], [rv[2], 0, -rv[0]], [-rv[1], rv[0], 0]]) / th
R_est = np.eye(3) + math.sin(th) * Kx + (1 - math.cos(th)) * Kx @ Kx
t_est = np.array([0.2, 0.05, -0.1])
t_gt = np.array([0.5, 0.0, -0.2])
reg = (math.sqrt(np.mean((a2 * est2 - gt2) ** 2)) + np.linalg.norm(R_est - np.eye(3))
       + np.linalg.norm(a2 * t_est - t_gt))
emit_array("kRegGt", gt2)
emit_array("kRegEst", est2)
emit_array("kRegRotVec", rv)
emit_array("kRegTransEst", t_est)
emit_array("kRegTransGt", t_gt)
emit("kRegValue", reg)

# Probabilistic and increase losses for N=2.
ll = [-0.8, -0.3]
lreg = [1.7, 0.4]
sigma = 0.5
emit("kProbValue", -sum(math.exp(l - r / sigma) for l, r in zip(ll, lreg)))
emit("kIncValue", (ll[0] - ll[1]) * math.log(1 + lreg[0]))

# Randomized trajectories: three iterates on 3x4 maps, evaluated with the
# initialization weights (0.05, 1, 0.05) and sigma_imp = 0.7.
def rodrigues(r):
    th = np.linalg.norm(r)
    if th == 0:
        return np.eye(3)
    k = r / th
    Kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * Kx + (1 - math.cos(th)) * Kx @ Kx


for case in range(3):
    gt = rng.uniform(1.0, 30.0, (3, 4))
    gt_valid = (rng.uniform(size=(3, 4)) > 0.2).astype(int)
    r_gt = rng.normal(0, 0.1, 3)
    t_gt = rng.normal(0, 1.0, 3)
    emit_array(f"kTrajGt{case}", gt)
    emit_mask(f"kTrajGtValid{case}", gt_valid)
    emit_array(f"kTrajRotGt{case}", r_gt)
    emit_array(f"kTrajTransGt{case}", t_gt)
    regs, lls = [], []
    for n in range(3):
        est = gt * rng.uniform(0.3, 3.0) * rng.uniform(0.8, 1.25, (3, 4))
        valid = (rng.uniform(size=(3, 4)) > 0.1).astype(int)
        r = r_gt + rng.normal(0, 0.05, 3)
        t = t_gt * rng.uniform(0.2, 4.0) + rng.normal(0, 0.2, 3)
        ll = rng.uniform(-1.5, 0.5)
        joint = (valid & gt_valid).astype(bool)
        a = float(np.median(gt[joint] / est[joint]))
        reg = (math.sqrt(np.mean((a * est[joint] - gt[joint]) ** 2))
               + np.linalg.norm(rodrigues(r) - rodrigues(r_gt)) + np.linalg.norm(a * t - t_gt))
        emit_array(f"kTrajEst{case}_{n}", est)
        emit_mask(f"kTrajValid{case}_{n}", valid)
        emit_array(f"kTrajRot{case}_{n}", r)
        emit_array(f"kTrajTrans{case}_{n}", t)
        emit(f"kTrajLl{case}_{n}", ll)
        regs.append(reg)
        lls.append(ll)
    l_reg = sum(regs)
    l_inc = sum((lls[n] - lls[n + 1]) * math.log1p(regs[n]) for n in range(2))
    l_prob = -sum(math.exp(l - r / 0.7) for l, r in zip(lls, regs))
    emit(f"kTrajReg{case}", l_reg)
    emit(f"kTrajInc{case}", l_inc)
    emit(f"kTrajProb{case}", l_prob)
    emit(f"kTrajTotal{case}", 0.05 * l_reg + 1.0 * l_inc + 0.05 * l_prob)

print("// Generated by make_oracles.py; do not edit.")
print("#pragma once\n\nnamespace oracle {\n")
print("\n".join(out))
print("\n}  // namespace oracle")
