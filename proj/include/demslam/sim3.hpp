#pragma once

#include <span>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace demslam {

using Vector7d = Eigen::Matrix<double, 7, 1>;
using Matrix7d = Eigen::Matrix<double, 7, 7>;

/// Tangent vector of Sim(3), laid out as (rho[3], phi[3], sigma):
/// rho is translation-like, phi the rotation vector in radians and sigma the
/// log-scale.
using Tangent7 = Vector7d;

/// Similarity transform x -> s * R * x + t.
class Sim3 {
 public:
  Sim3() = default;
  Sim3(const Eigen::Quaterniond& q, const Eigen::Vector3d& t, double s);
  Sim3(const Eigen::Matrix3d& R, const Eigen::Vector3d& t, double s);

  static Sim3 identity() { return {}; }

  [[nodiscard]] const Eigen::Quaterniond& rotation() const noexcept { return q_; }
  [[nodiscard]] Eigen::Matrix3d rotation_matrix() const { return q_.toRotationMatrix(); }
  [[nodiscard]] const Eigen::Vector3d& translation() const noexcept { return t_; }
  [[nodiscard]] double scale() const noexcept { return s_; }

  [[nodiscard]] Sim3 inverse() const;
  [[nodiscard]] Eigen::Matrix4d matrix() const;

  /// Ad_T such that T * exp(xi) * T^-1 = exp(Ad_T * xi).
  [[nodiscard]] Matrix7d adjoint() const;

  Sim3 operator*(const Sim3& other) const;
  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const { return s_ * (q_ * p) + t_; }

 private:
  Eigen::Quaterniond q_{Eigen::Quaterniond::Identity()};
  Eigen::Vector3d t_{Eigen::Vector3d::Zero()};
  double s_{1.0};
};

Eigen::Matrix3d hat(const Eigen::Vector3d& v);

Sim3 sim3_exp(const Tangent7& xi);

/// Principal-branch logarithm. Throws BranchSingularity when the rotation
/// angle reaches pi.
Tangent7 sim3_log(const Sim3& T);

inline Sim3 sim3_compose(const Sim3& a, const Sim3& b) { return a * b; }
inline Sim3 sim3_inverse(const Sim3& T) { return T.inverse(); }
inline Eigen::Vector3d sim3_act(const Sim3& T, const Eigen::Vector3d& p) { return T * p; }

/// Translation block V of the exponential: t = V(phi, sigma) * rho.
Eigen::Matrix3d sim3_translation_jacobian(const Eigen::Vector3d& phi, double sigma);

/// Lie-algebra adjoint ad(xi), i.e. [xi^, eta^] = (ad(xi) * eta)^.
Matrix7d sim3_ad(const Tangent7& xi);

/// Right Jacobian: exp(xi + d) ~= exp(xi) * exp(J_r(xi) * d).
Matrix7d sim3_right_jacobian(const Tangent7& xi);
Matrix7d sim3_right_jacobian_inverse(const Tangent7& xi);

/// Weighted least-squares similarity (or rigid, when with_scale is false)
/// alignment minimizing sum w_k * |dst_k - T(src_k)|^2. Empty weights means
/// uniform. Throws DegenerateInput for fewer than 3 points or collinear src.
Sim3 estimate_relative_sim3(std::span<const Eigen::Vector3d> src,
                            std::span<const Eigen::Vector3d> dst,
                            std::span<const double> weights = {}, bool with_scale = true);

/// Root-mean-square of |dst_k - T(src_k)|.
double alignment_rms(const Sim3& T, std::span<const Eigen::Vector3d> src,
                     std::span<const Eigen::Vector3d> dst);

}  // namespace demslam
