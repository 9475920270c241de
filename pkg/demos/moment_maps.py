"""Moment-map geometry on a 6-segment clip: cells, intervals, IoU and soft labels."""
import numpy as np

from vprg.moments import enumerate_moments, moment_iou_map, moment_to_interval, soft_label_map, valid_mask

K, DURATION = 6, 12.0
np.set_printoptions(precision=2, suppress=True)

cells = enumerate_moments(K)
print(f"{len(cells)} candidate moments for K={K}")
for cell in cells[:4]:
    print(cell, "->", moment_to_interval(cell, K, DURATION))

target = (1, 3)
print("\nIoU with", target)
print(moment_iou_map(target, K))

print("\nsoft labels (IoU 0.5 -> 0, IoU 1 -> 1)")
labels = soft_label_map(target, K)
print(labels)
print("cells with a positive label:", int((labels > 0).sum()), "of", int(valid_mask(K).sum()))
