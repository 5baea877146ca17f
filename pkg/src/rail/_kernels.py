"""JIT-compiled hot kernels for the simulator and policy forward pass.

Everything here is private. The public environment/policy operations wrap
these kernels, and the rollout engine composes them into a whole-episode
loop so that training stays fast on a single core. Keeping one set of
kernels guarantees the per-step API and the batched rollout path execute
bit-identical arithmetic.
"""

import numpy as np
from numba import njit

# Vehicle footprint (meters). Collision boxes and LIDAR targets use these.
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 3.0

# Scripted expert gap thresholds (meters, center-to-center).
GAP_OPEN = 70.0
GAP_CLOSE = 55.0
GAP_SAFE = 18.0
# A vehicle this close behind the host blocks an adjacent lane: its slot
# counts as occupied, so the lane's forward gap goes negative. Vehicles
# closing on the host (from behind, or ahead while the host is faster)
# claim the extra ground they cover while the host matches the lane's
# speed after merging.
LANE_REAR_MARGIN = 10.0
LANE_CLEAR_SECONDS = 2.0

# Host state vector layout (float64, length 7).
H_POS = 0      # longitudinal position, m
H_SPEED = 1    # speed, km/h
H_FROM = 2     # lane index the maneuver started from (== H_TO when idle)
H_TO = 3       # lane index the maneuver is heading to
H_PROG = 4     # maneuver progress in [0, 1); 0 when idle
H_ACTIVE = 5   # 1.0 while a lane change is in progress
H_STEP = 6     # steps taken so far


@njit(cache=True, error_model="numpy")
def wrap_signed(d, length):
    """Map a longitudinal difference onto [-length/2, length/2)."""
    d = d % length
    if d >= 0.5 * length:
        d -= length
    return d


@njit(cache=True, error_model="numpy")
def ray_scan(h_pos, h_lat, h_speed, t_pos, t_lat, t_speed,
             cos_r, sin_r, road_len, r_max, v_max, dist_out, rel_out):
    """Cast all rays against every traffic vehicle rectangle.

    Writes normalized distances (1.0 = no hit within range) and the hit
    vehicle's speed relative to the host, normalized by v_max (0 when no
    hit). Rays are ordered counterclockwise starting at the heading axis;
    the lateral axis of the scan frame points left.
    """
    n_rays = cos_r.shape[0]
    for j in range(n_rays):
        dist_out[j] = r_max
        rel_out[j] = 0.0
    half_len = 0.5 * VEHICLE_LENGTH
    half_wid = 0.5 * VEHICLE_WIDTH
    reach = r_max + half_len
    for v in range(t_pos.shape[0]):
        dx = wrap_signed(t_pos[v] - h_pos, road_len)
        if dx > reach or dx < -reach:
            continue
        dy = h_lat - t_lat[v]  # lateral axis points left; lanes grow rightward
        xmin = dx - half_len
        xmax = dx + half_len
        ymin = dy - half_wid
        ymax = dy + half_wid
        for j in range(n_rays):
            t1 = xmin / cos_r[j]
            t2 = xmax / cos_r[j]
            if t1 > t2:
                t1, t2 = t2, t1
            t3 = ymin / sin_r[j]
            t4 = ymax / sin_r[j]
            if t3 > t4:
                t3, t4 = t4, t3
            tmin = t1 if t1 > t3 else t3
            tmax = t2 if t2 < t4 else t4
            if tmax >= tmin and tmax >= 0.0:
                d = tmin if tmin > 0.0 else 0.0
                if d < dist_out[j]:
                    dist_out[j] = d
                    rel_out[j] = (t_speed[v] - h_speed) / v_max
    for j in range(n_rays):
        d = dist_out[j] / r_max
        if d >= 1.0:
            d = 1.0
            rel_out[j] = 0.0
        dist_out[j] = d


@njit(cache=True, error_model="numpy")
def step_core(host, t_pos, t_speed, t_lat, prev_rel, action,
              lane_count, lane_width, road_len, dt,
              vel_acc, vel_dec, v_min, v_max, lc_steps, horizon):
    """Advance the world by one decision step. Mutates host/t_pos/prev_rel.

    Returns (lon_reward, lat_reward, terminated, collided, overtakes_delta,
    lane_change_completed).
    """
    speed = host[H_SPEED]
    lane_from = int(host[H_FROM])
    lane_to = int(host[H_TO])
    progress = host[H_PROG]
    active = host[H_ACTIVE] != 0.0

    refused = False
    if action == 1:
        speed = min(v_max, speed + vel_acc)
    elif action == 2:
        speed = max(v_min, speed - vel_dec)
    elif action == 3 or action == 4:
        want = -1 if action == 3 else 1
        if active:
            current = 1 if lane_to > lane_from else -1
            if want == -current:
                # opposite command mid-maneuver: reverse back toward the
                # source lane from the current lateral position
                lane_from, lane_to = lane_to, lane_from
                progress = 1.0 - progress
        else:
            target = lane_to + want
            if 0 <= target < lane_count:
                lane_from = lane_to
                lane_to = target
                progress = 0.0
                active = True
            else:
                refused = True

    maneuver_step = active or refused
    completed = False
    if active:
        progress += 1.0 / lc_steps
        if progress >= 1.0 - 1e-9:
            progress = 0.0
            lane_from = lane_to
            active = False
            completed = True

    pos = (host[H_POS] + speed * dt / 3.6) % road_len
    for v in range(t_pos.shape[0]):
        t_pos[v] = (t_pos[v] + t_speed[v] * dt / 3.6) % road_len

    c_from = (lane_from + 0.5) * lane_width
    c_to = (lane_to + 0.5) * lane_width
    lat = c_from + (c_to - c_from) * progress

    collided = False
    overtakes = 0
    for v in range(t_pos.shape[0]):
        rel = wrap_signed(pos - t_pos[v], road_len)
        if abs(rel) < VEHICLE_LENGTH and abs(lat - t_lat[v]) < VEHICLE_WIDTH:
            collided = True
        if prev_rel[v] < 0.0 and rel >= 0.0 and rel - prev_rel[v] < 0.25 * road_len:
            overtakes += 1
        prev_rel[v] = rel

    off_road = (lat < 0.5 * VEHICLE_WIDTH
                or lat > lane_count * lane_width - 0.5 * VEHICLE_WIDTH)
    step_index = host[H_STEP] + 1.0
    terminated = collided or off_road or step_index >= horizon

    host[H_POS] = pos
    host[H_SPEED] = speed
    host[H_FROM] = float(lane_from)
    host[H_TO] = float(lane_to)
    host[H_PROG] = progress
    host[H_ACTIVE] = 1.0 if active else 0.0
    host[H_STEP] = step_index

    lon_reward = speed / v_max
    lat_reward = -1.0 if maneuver_step else 0.0
    return lon_reward, lat_reward, terminated, collided, overtakes, completed


@njit(cache=True, error_model="numpy")
def host_lateral(host, lane_width):
    c_from = (int(host[H_FROM]) + 0.5) * lane_width
    c_to = (int(host[H_TO]) + 0.5) * lane_width
    return c_from + (c_to - c_from) * host[H_PROG]


@njit(cache=True, error_model="numpy")
def policy_logits(kind, w_in, w_out, mu, inv_sigma, obs, logits_out):
    """Whiten the observation and fill logits_out.

    kind 0 = linear (w_in is actions x n), kind 1 = two-layer
    (w_in hidden x n, w_out actions x hidden, tanh in between).
    """
    n = obs.shape[0]
    s_hat = np.empty(n)
    for i in range(n):
        s_hat[i] = (obs[i] - mu[i]) * inv_sigma[i]
    if kind == 0:
        for a in range(w_in.shape[0]):
            acc = 0.0
            for i in range(n):
                acc += w_in[a, i] * s_hat[i]
            logits_out[a] = acc
    else:
        hidden = np.empty(w_in.shape[0])
        for q in range(w_in.shape[0]):
            acc = 0.0
            for i in range(n):
                acc += w_in[q, i] * s_hat[i]
            hidden[q] = np.tanh(acc)
        for a in range(w_out.shape[0]):
            acc = 0.0
            for q in range(hidden.shape[0]):
                acc += w_out[a, q] * hidden[q]
            logits_out[a] = acc


@njit(cache=True, error_model="numpy")
def argmax_first(x):
    """Index of the maximum; ties resolve to the lowest index."""
    best = 0
    for i in range(1, x.shape[0]):
        if x[i] > x[best]:
            best = i
    return best


@njit(cache=True, error_model="numpy")
def push_frame(frames, dists, rels, speed_norm):
    """Shift the frame stack left by one and append the newest frame."""
    n_rays = dists.shape[0]
    for k in range(frames.shape[0] - 1):
        for f in range(frames.shape[1]):
            frames[k, f] = frames[k + 1, f]
    last = frames.shape[0] - 1
    for j in range(n_rays):
        frames[last, j] = dists[j]
        frames[last, n_rays + j] = rels[j]
    frames[last, 2 * n_rays] = speed_norm


@njit(cache=True, error_model="numpy")
def run_policy_episode(kind, w_in, w_out, mu, inv_sigma,
                       host, t_pos, t_speed, t_lat, prev_rel, frames,
                       cos_r, sin_r,
                       lane_count, lane_width, road_len, r_max, dt,
                       vel_acc, vel_dec, v_min, v_max, lc_steps, horizon,
                       obs_out, act_out, spd_out, lon_out, lat_out):
    """Run one full episode with a linear/two-layer policy.

    State arrays come straight from env_reset and are consumed in place.
    Output buffers must be horizon-sized; returns (steps, collided,
    lane_changes, overtakes).
    """
    n_frames = frames.shape[0]
    frame_len = frames.shape[1]
    n_rays = cos_r.shape[0]
    p = w_in.shape[0] if kind == 0 else w_out.shape[0]
    logits = np.empty(p)
    dists = np.empty(n_rays)
    rels = np.empty(n_rays)
    lane_changes = 0
    overtakes = 0
    collided = False
    steps = 0
    for t in range(horizon):
        idx = 0
        for k in range(n_frames):
            for f in range(frame_len):
                obs_out[t, idx] = frames[k, f]
                idx += 1
        policy_logits(kind, w_in, w_out, mu, inv_sigma, obs_out[t], logits)
        action = argmax_first(logits)
        lon, lat, terminated, coll, ot, done_lc = step_core(
            host, t_pos, t_speed, t_lat, prev_rel, action,
            lane_count, lane_width, road_len, dt,
            vel_acc, vel_dec, v_min, v_max, lc_steps, horizon)
        act_out[t] = action
        spd_out[t] = host[H_SPEED]
        lon_out[t] = lon
        lat_out[t] = lat
        overtakes += ot
        if done_lc:
            lane_changes += 1
        steps = t + 1
        if terminated:
            collided = coll
            break
        ray_scan(host[H_POS], host_lateral(host, lane_width), host[H_SPEED],
                 t_pos, t_lat, t_speed, cos_r, sin_r, road_len, r_max, v_max,
                 dists, rels)
        push_frame(frames, dists, rels, host[H_SPEED] / v_max)
    return steps, collided, lane_changes, overtakes


@njit(cache=True, error_model="numpy")
def lane_gap(lane, h_pos, h_speed, t_pos, t_lane, t_speed, road_len,
             rear_margin, closing_seconds):
    """Effective forward gap in a lane and the speed of its provider.

    With rear_margin/closing_seconds zero this is the plain distance to
    the nearest vehicle ahead. For merge checks, a vehicle also claims
    the ground covered by the relative motion over closing_seconds: a
    faster vehicle behind reaches forward (its distance counts negative
    inside the extended margin), and a slower vehicle ahead has its gap
    discounted by the host's closing speed. Returns (2 * road_len,
    h_speed) for an open lane.
    """
    best = road_len * 2.0
    best_speed = h_speed
    for v in range(t_pos.shape[0]):
        if t_lane[v] != lane:
            continue
        margin = rear_margin
        if margin > 0.0 and t_speed[v] > h_speed:
            margin += (t_speed[v] - h_speed) / 3.6 * closing_seconds
        d = (t_pos[v] - h_pos + margin) % road_len - margin
        if d >= 0.0 and closing_seconds > 0.0 and h_speed > t_speed[v]:
            d -= (h_speed - t_speed[v]) / 3.6 * closing_seconds
        if d < best:
            best = d
            best_speed = t_speed[v]
    return best, best_speed


@njit(cache=True, error_model="numpy")
def forward_gap(lane, h_pos, h_speed, t_pos, t_lane, t_speed, road_len,
                rear_margin, closing_seconds):
    gap, _ = lane_gap(lane, h_pos, h_speed, t_pos, t_lane, t_speed,
                      road_len, rear_margin, closing_seconds)
    return gap


@njit(cache=True, error_model="numpy")
def expert_rule(h_pos, h_speed, current_lane, lc_dir, t_pos, t_lane, t_speed,
                lane_count, road_len, gap_open, gap_close, gap_safe):
    """Gap-based driving rule used by the scripted expert.

    While a lane change is in progress (lc_dir -1/+1) the expert holds
    course and emits maintain: it never revises a change mid-maneuver.
    Otherwise: accelerate on an open road; when blocked, move to the
    adjacent lane with the larger effective forward gap (left on ties) if
    that gap clears the safety threshold, otherwise decelerate. In the
    middle band the host tracks its leader: it accelerates while slower
    than the leader (the gap is widening) and maintains otherwise.
    Traffic never brakes, so a host left below its lane's flow speed
    would be rear-ended with no counterplay.
    """
    if lc_dir != 0:
        return 0
    fwd, lead_speed = lane_gap(current_lane, h_pos, h_speed, t_pos, t_lane,
                               t_speed, road_len, 0.0, 0.0)
    if fwd > gap_open:
        return 1
    if fwd < gap_close:
        gap_left = -1.0
        gap_right = -1.0
        if current_lane - 1 >= 0:
            gap_left = forward_gap(current_lane - 1, h_pos, h_speed, t_pos,
                                   t_lane, t_speed, road_len,
                                   LANE_REAR_MARGIN, LANE_CLEAR_SECONDS)
        if current_lane + 1 < lane_count:
            gap_right = forward_gap(current_lane + 1, h_pos, h_speed, t_pos,
                                    t_lane, t_speed, road_len,
                                    LANE_REAR_MARGIN, LANE_CLEAR_SECONDS)
        if gap_left >= gap_right:
            if gap_left > gap_safe:
                return 3
        else:
            if gap_right > gap_safe:
                return 4
        return 2
    if h_speed < lead_speed:
        return 1
    return 0
