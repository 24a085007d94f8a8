"""Walk one synthetic video through trajectory extraction and triplet mining.

    python demos/phase_triplets.py
"""
import numpy as np

from formssl.synthgen import SynthParams, generate_session
from formssl.trajectory import extract_trajectory
from formssl.triplets import build_md_triplets, mine_pose_triplets

sessions = [generate_session(SynthParams(detection_noise_sigma=1.0, seed=s, video_id=f"v{s}"), render=False)
            for s in range(3)]
trajs = []
for s in sessions:
    tr, half_cycles, reps = extract_trajectory(s.gt_detections)
    trajs.append(tr)
    err = np.abs(tr.phase - s.gt_phase).max()
    print(f"{tr.video_id}: {len(half_cycles)} half-cycles, {len(reps)} repetitions, max phase error {err:.1f}")

triplets = mine_pose_triplets(trajs, seed=0)
t = triplets[0]
print(f"{len(triplets)} pose triplets; first: anchor {t.anchor} pos {t.positive} neg {t.negative}, phases {t.phases}")

_, _, reps = extract_trajectory(sessions[0].gt_detections)
clip = build_md_triplets(reps, 16, seed=0)[0]
print(f"MD triplet: anchor frames {clip.anchor.frame_indices[:4]}..., reversed leg: {clip.reverse_target}")
