#pragma once

#include "mpm/types.hpp"

namespace mpm {

/// Persistent per-vertex contact record. One lives on each of the 8 corners
/// of a material-point domain.
struct ContactState {
  // Current-iteration state.
  bool active = false;  // face projection with negative gap and force applied
  int body = -1;
  int tri = -1;
  Vec2 xi = Vec2::Zero();
  double gap = 0.0;
  Vec3 normal = Vec3::Zero();
  double p_n = 0.0;         // normal force, negative while penetrating
  Vec3 p_t = Vec3::Zero();  // tangential force
  bool slip = false;

  // Converged history from the previous step.
  bool has_prev = false;    // previous-step face projection exists
  int body_prev = -1;
  int tri_prev = -1;
  Vec2 xi_prev = Vec2::Zero();
  Vec3 p_t_prev = Vec3::Zero();

  // Converged gap, kept for the domain-reset correction.
  bool had_face_old = false;
  double gap_old = 0.0;
};

}  // namespace mpm
