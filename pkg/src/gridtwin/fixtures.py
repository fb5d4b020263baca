"""Builtin feeders and synthetic smart-meter load profiles.

The three feeders follow the topologies of the IEEE 13-bus (reduced to 11
buses), IEEE 37-bus and 69-bus test systems. Per-branch impedances are
fixture choices: reactances are in the range of the published systems and each
branch's R/X ratio is drawn from that feeder's conductor library.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .network import Bus, Branch, ConductorLibrary, RadialNetwork, build_network

LIBRARIES = {
    "feeder13": (0.5153, 1.2840, 0.8124, 0.8112, 0.9864, 2.0655),
    "feeder37": (1.4536, 1.6222, 2.7482, 1.9691),
    "feeder69": (0.4, 0.8, 0.9, 2.0, 2.9, 3.0, 3.1, 3.3, 3.4),
}

# (child, parent, x [p.u.], R/X)
_FEEDER13 = [
    ("632", "650", 0.0200, 0.5153),
    ("633", "632", 0.0050, 1.2840),
    ("645", "632", 0.0060, 0.8124),
    ("646", "645", 0.0040, 0.8124),
    ("671", "632", 0.0180, 0.5153),
    ("680", "671", 0.0100, 0.5153),
    ("684", "671", 0.0035, 0.8112),
    ("611", "684", 0.0045, 0.9864),
    ("652", "684", 0.0080, 2.0655),
    ("675", "671", 0.0055, 0.9864),
]
_ROOT13 = "650"

# IEEE 37-bus layout; reactance scaled from segment length and line configuration,
# the 709-775 transformer modelled as a series branch
_FEEDER37 = [
    ("701", "799", 0.00555, 1.4536),
    ("702", "701", 0.00384, 1.6222),
    ("705", "702", 0.00240, 1.9691),
    ("713", "702", 0.00180, 2.7482),
    ("703", "702", 0.00528, 1.6222),
    ("727", "703", 0.00144, 1.9691),
    ("730", "703", 0.00300, 2.7482),
    ("714", "704", 0.00080, 1.9691),
    ("720", "704", 0.00400, 2.7482),
    ("742", "705", 0.00192, 1.9691),
    ("712", "705", 0.00144, 1.9691),
    ("725", "706", 0.00168, 1.9691),
    ("724", "707", 0.00456, 1.9691),
    ("722", "707", 0.00080, 1.9691),
    ("733", "708", 0.00160, 2.7482),
    ("732", "708", 0.00192, 1.9691),
    ("731", "709", 0.00300, 2.7482),
    ("708", "709", 0.00160, 2.7482),
    ("735", "710", 0.00120, 1.9691),
    ("736", "710", 0.00768, 1.9691),
    ("741", "711", 0.00200, 2.7482),
    ("740", "711", 0.00120, 1.9691),
    ("704", "713", 0.00260, 2.7482),
    ("718", "714", 0.00312, 1.9691),
    ("707", "720", 0.00552, 1.9691),
    ("706", "720", 0.00300, 2.7482),
    ("744", "727", 0.00140, 2.7482),
    ("709", "730", 0.00100, 2.7482),
    ("734", "733", 0.00280, 2.7482),
    ("737", "734", 0.00320, 2.7482),
    ("710", "734", 0.00312, 1.9691),
    ("738", "737", 0.00200, 2.7482),
    ("711", "738", 0.00200, 2.7482),
    ("728", "744", 0.00120, 1.9691),
    ("729", "744", 0.00168, 1.9691),
    ("775", "709", 0.00800, 1.4536),
]
_ROOT37 = "799"

# 69-bus layout (main feeder 1..27 with six laterals)
_FEEDER69 = [
    ("2", "1", 0.00150, 0.4),
    ("3", "2", 0.00150, 0.4),
    ("4", "3", 0.00501, 0.4),
    ("5", "4", 0.00536, 0.8),
    ("6", "5", 0.00798, 2.0),
    ("7", "6", 0.00690, 2.0),
    ("8", "7", 0.00400, 2.0),
    ("9", "8", 0.00811, 2.0),
    ("10", "9", 0.00539, 3.3),
    ("11", "10", 0.00692, 3.1),
    ("12", "11", 0.00485, 3.4),
    ("13", "12", 0.00663, 3.4),
    ("14", "13", 0.00649, 2.9),
    ("15", "14", 0.00715, 3.4),
    ("16", "15", 0.00219, 3.3),
    ("17", "16", 0.00566, 3.4),
    ("18", "17", 0.00323, 3.3),
    ("19", "18", 0.00588, 3.4),
    ("20", "19", 0.00470, 2.9),
    ("21", "20", 0.00531, 3.4),
    ("22", "21", 0.00683, 3.0),
    ("23", "22", 0.00513, 2.9),
    ("24", "23", 0.00817, 2.9),
    ("25", "24", 0.00178, 3.4),
    ("26", "25", 0.00866, 3.1),
    ("27", "26", 0.00461, 3.4),
    ("28", "3", 0.00465, 0.4),
    ("29", "28", 0.00202, 0.4),
    ("30", "29", 0.00466, 0.4),
    ("31", "30", 0.00520, 0.4),
    ("32", "31", 0.00264, 0.9),
    ("33", "32", 0.00856, 0.9),
    ("34", "33", 0.00291, 0.9),
    ("35", "34", 0.00164, 0.9),
    ("36", "3", 0.00859, 0.4),
    ("37", "36", 0.00895, 0.4),
    ("38", "37", 0.00661, 0.4),
    ("39", "38", 0.00738, 0.4),
    ("40", "39", 0.00685, 0.4),
    ("41", "40", 0.00875, 0.8),
    ("42", "41", 0.00890, 0.8),
    ("43", "42", 0.00153, 0.8),
    ("44", "43", 0.00816, 0.8),
    ("45", "44", 0.00315, 0.8),
    ("46", "45", 0.00378, 0.8),
    ("47", "4", 0.00885, 0.4),
    ("48", "47", 0.00506, 0.4),
    ("49", "48", 0.00504, 0.9),
    ("50", "49", 0.00872, 0.9),
    ("51", "8", 0.00436, 2.0),
    ("52", "51", 0.00895, 2.0),
    ("53", "9", 0.00715, 3.0),
    ("54", "53", 0.00605, 3.1),
    ("55", "54", 0.00661, 3.0),
    ("56", "55", 0.00256, 3.1),
    ("57", "56", 0.00547, 3.0),
    ("58", "57", 0.00329, 2.9),
    ("59", "58", 0.00714, 2.9),
    ("60", "59", 0.00813, 3.1),
    ("61", "60", 0.00726, 3.1),
    ("62", "61", 0.00625, 2.9),
    ("63", "62", 0.00370, 2.9),
    ("64", "63", 0.00810, 3.0),
    ("65", "64", 0.00330, 2.9),
    ("66", "11", 0.00245, 3.3),
    ("67", "66", 0.00867, 3.3),
    ("68", "12", 0.00591, 3.4),
    ("69", "68", 0.00402, 3.4),
]
_ROOT69 = "1"


def _from_table(root, rows, base) -> RadialNetwork:
    names = [root] + [c for c, *_ in rows]
    idx = {nm: i for i, nm in enumerate(names)}
    buses = [Bus(i, nm) for i, nm in enumerate(names)]
    branches = [Branch(idx[c], idx[p], lam * x, x) for c, p, x, lam in rows]
    return build_network(buses, branches, base=base)


def feeder13() -> RadialNetwork:
    return _from_table(_ROOT13, _FEEDER13, {"v_base_kV": 4.16, "s_base_kVA": 5000.0})


def feeder37() -> RadialNetwork:
    return _from_table(_ROOT37, _FEEDER37, {"v_base_kV": 4.8, "s_base_kVA": 2500.0})


def feeder69() -> RadialNetwork:
    return _from_table(_ROOT69, _FEEDER69, {"v_base_kV": 12.66, "s_base_kVA": 10000.0})


BUILTIN = {"feeder13": feeder13, "feeder37": feeder37, "feeder69": feeder69}

# per-bus load scale (p.u.) for each feeder; puts the deepest squared voltage
# around 0.96-0.97 at the evening peak
LOAD_SCALE = {"feeder13": 0.08, "feeder37": 0.015, "feeder69": 0.003}


def load_builtin(name: str) -> tuple[RadialNetwork, ConductorLibrary]:
    try:
        net = BUILTIN[name]()
    except KeyError:
        raise ConfigError(f"unknown fixture {name!r}; choose from {sorted(BUILTIN)}") from None
    return net, ConductorLibrary(LIBRARIES[name])


def diurnal_shape(hours) -> np.ndarray:
    """Residential-style daily profile, peak near 19:00, trough near 04:00, in [0.45, 1.0]."""
    h = np.asarray(hours, dtype=float) % 24
    evening = np.exp(-0.5 * ((h - 19.0) / 3.0) ** 2)
    morning = 0.45 * np.exp(-0.5 * ((h - 8.0) / 2.0) ** 2)
    return 0.45 + 0.55 * np.clip(evening + morning, 0, 1)


def synthetic_loads(n: int, K: int, seed: int, scale: float = 1.0, sigma: float = 0.5,
                    shift_hours: float = 3.0, pf_range=(0.85, 0.97), pf_jitter: float = 0.03):
    """Hourly net injections ``(p, q)``, each ``(K, n)``, loads negative.

    Bus ``j`` draws ``scale * base_j * diurnal(hour - shift_j) * lognormal(0, sigma)``
    with ``base_j ~ U(0.5, 1.5)`` and ``shift_j ~ U(-shift_hours, shift_hours)``;
    reactive power follows a per-bus power factor with a small per-sample jitter.
    """
    rng = np.random.default_rng(seed)
    base = scale * rng.uniform(0.5, 1.5, size=n)
    shift = rng.uniform(-shift_hours, shift_hours, size=n)
    pf = rng.uniform(*pf_range, size=n)
    tan_phi = np.tan(np.arccos(pf))
    hours = np.arange(K)
    shape = diurnal_shape(hours[:, None] - shift[None, :])
    mult = rng.lognormal(0.0, sigma, size=(K, n))
    p = base[None, :] * shape * mult
    q = p * tan_phi[None, :] * (1.0 + pf_jitter * rng.standard_normal((K, n)))
    return -p, -q
