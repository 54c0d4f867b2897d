"""Oracles shared by the test modules; none of them call the decoders."""

import numpy as np


def truth_partition(gt):
    """Ground-truth people as sets of ``(joint, x, y)`` over visible joints."""
    groups = []
    for n in range(gt.n_people):
        groups.append(frozenset(
            (j, int(gt.locations[n, j, 0]), int(gt.locations[n, j, 1]))
            for j in range(gt.n_joints) if gt.visible[n, j]
        ))
    return sorted(groups, key=sorted)


def nearest_tag_partition(gt, true_tags, tag_maps):
    """Assign each annotated joint to the person whose true tag is closest to its observed tag."""
    groups = [set() for _ in range(gt.n_people)]
    for n in range(gt.n_people):
        for j in range(gt.n_joints):
            if gt.visible[n, j]:
                x, y = int(gt.locations[n, j, 0]), int(gt.locations[n, j, 1])
                owner = int(np.argmin(np.abs(true_tags - tag_maps[j, y, x])))
                groups[owner].add((j, x, y))
    return sorted((frozenset(g) for g in groups if g), key=sorted)


def same_partition_up_to_labels(a, b):
    """True when two label maps split their foreground identically."""
    a, b = np.asarray(a), np.asarray(b)
    if not np.array_equal(a < 0, b < 0):
        return False
    fg = a >= 0
    pairs = set(zip(a[fg].tolist(), b[fg].tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})
