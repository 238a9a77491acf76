#include "demslam/sim3.hpp"

#include <cmath>

#include <Eigen/LU>
#include <Eigen/SVD>

#include "demslam/error.hpp"

namespace demslam {
namespace {

// I_k(sigma) = integral_0^1 u^k e^(sigma u) du, by its everywhere-convergent series.
double exp_moment(int k, double sigma) {
  double term = 1.0;  // sigma^n / n!
  double sum = 1.0 / (k + 1);
  for (int n = 1; n < 400; ++n) {
    term *= sigma / n;
    const double add = term / (n + k + 1);
    sum += add;
    if (std::abs(add) <= 1e-18 * std::abs(sum)) break;
  }
  return sum;
}

Eigen::Quaterniond canonical(Eigen::Quaterniond q) {
  q.normalize();
  if (q.w() < 0.0) q.coeffs() = -q.coeffs();
  return q;
}

}  // namespace

Sim3::Sim3(const Eigen::Quaterniond& q, const Eigen::Vector3d& t, double s)
    : q_(q.normalized()), t_(t), s_(s) {
  if (!(s > 0.0) || !std::isfinite(s)) {
    throw Error(ErrorCode::DegenerateInput, "Sim3 scale must be positive and finite");
  }
}

Sim3::Sim3(const Eigen::Matrix3d& R, const Eigen::Vector3d& t, double s)
    : Sim3(Eigen::Quaterniond(R), t, s) {}

Sim3 Sim3::inverse() const {
  const Eigen::Quaterniond qi = q_.conjugate();
  return {qi, -(qi * t_) / s_, 1.0 / s_};
}

Eigen::Matrix4d Sim3::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = s_ * rotation_matrix();
  m.topRightCorner<3, 1>() = t_;
  return m;
}

Matrix7d Sim3::adjoint() const {
  const Eigen::Matrix3d R = rotation_matrix();
  Matrix7d ad = Matrix7d::Zero();
  ad.block<3, 3>(0, 0) = s_ * R;
  ad.block<3, 3>(0, 3) = hat(t_) * R;
  ad.block<3, 1>(0, 6) = -t_;
  ad.block<3, 3>(3, 3) = R;
  ad(6, 6) = 1.0;
  return ad;
}

Sim3 Sim3::operator*(const Sim3& other) const {
  return {q_ * other.q_, s_ * (q_ * other.t_) + t_, s_ * other.s_};
}

Eigen::Matrix3d hat(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0.0, -v.z(), v.y(),  //
      v.z(), 0.0, -v.x(),   //
      -v.y(), v.x(), 0.0;
  return m;
}

// V = integral_0^1 e^(sigma u) exp(u phi^) du = a I + b phi^ + c phi^2.
Eigen::Matrix3d sim3_translation_jacobian(const Eigen::Vector3d& phi, double sigma) {
  const double theta = phi.norm();
  const double a = exp_moment(0, sigma);
  double b = 0.0;
  double c = 0.0;
  if (theta < 1e-3) {
    const double t2 = theta * theta;
    b = exp_moment(1, sigma) - t2 * exp_moment(3, sigma) / 6.0 +
        t2 * t2 * exp_moment(5, sigma) / 120.0;
    c = exp_moment(2, sigma) / 2.0 - t2 * exp_moment(4, sigma) / 24.0 +
        t2 * t2 * exp_moment(6, sigma) / 720.0;
  } else {
    const double es = std::exp(sigma);
    const double st = std::sin(theta);
    const double ct = std::cos(theta);
    const double den = sigma * sigma + theta * theta;
    const double s_int = (es * (sigma * st - theta * ct) + theta) / den;
    const double c_int = (es * (sigma * ct + theta * st) - sigma) / den;
    b = s_int / theta;
    c = (a - c_int) / (theta * theta);
  }
  const Eigen::Matrix3d P = hat(phi);
  return a * Eigen::Matrix3d::Identity() + b * P + c * P * P;
}

Sim3 sim3_exp(const Tangent7& xi) {
  const Eigen::Vector3d rho = xi.head<3>();
  const Eigen::Vector3d phi = xi.segment<3>(3);
  const double sigma = xi(6);
  const double theta = phi.norm();

  Eigen::Quaterniond q;
  if (theta < 1e-8) {
    const double k = 0.5 - theta * theta / 48.0;
    q = Eigen::Quaterniond(1.0 - theta * theta / 8.0, k * phi.x(), k * phi.y(), k * phi.z());
  } else {
    const double k = std::sin(0.5 * theta) / theta;
    q = Eigen::Quaterniond(std::cos(0.5 * theta), k * phi.x(), k * phi.y(), k * phi.z());
  }
  return {q, sim3_translation_jacobian(phi, sigma) * rho, std::exp(sigma)};
}

Tangent7 sim3_log(const Sim3& T) {
  const Eigen::Quaterniond q = canonical(T.rotation());
  const double n = q.vec().norm();
  const double w = q.w();
  if (w < 1e-12) {
    throw Error(ErrorCode::BranchSingularity, "rotation angle is pi; log is not unique");
  }
  Eigen::Vector3d phi;
  if (n < 1e-8) {
    phi = (2.0 / w) * (1.0 - n * n / (3.0 * w * w)) * q.vec();
  } else {
    phi = (2.0 * std::atan2(n, w) / n) * q.vec();
  }
  const double sigma = std::log(T.scale());
  const Eigen::Matrix3d V = sim3_translation_jacobian(phi, sigma);
  Tangent7 xi;
  xi.head<3>() = V.partialPivLu().solve(T.translation());
  xi.segment<3>(3) = phi;
  xi(6) = sigma;
  return xi;
}

Matrix7d sim3_ad(const Tangent7& xi) {
  const Eigen::Vector3d rho = xi.head<3>();
  const Eigen::Vector3d phi = xi.segment<3>(3);
  const double sigma = xi(6);
  Matrix7d ad = Matrix7d::Zero();
  ad.block<3, 3>(0, 0) = hat(phi) + sigma * Eigen::Matrix3d::Identity();
  ad.block<3, 3>(0, 3) = hat(rho);
  ad.block<3, 1>(0, 6) = -rho;
  ad.block<3, 3>(3, 3) = hat(phi);
  return ad;
}

// J_r = sum_n (-ad)^n / (n+1)!, an entire series.
Matrix7d sim3_right_jacobian(const Tangent7& xi) {
  const Matrix7d m = -sim3_ad(xi);
  Matrix7d term = Matrix7d::Identity();
  Matrix7d sum = Matrix7d::Identity();
  for (int n = 1; n < 200; ++n) {
    term = term * m / static_cast<double>(n + 1);
    sum += term;
    if (term.cwiseAbs().maxCoeff() <= 1e-18 * sum.cwiseAbs().maxCoeff()) break;
  }
  return sum;
}

Matrix7d sim3_right_jacobian_inverse(const Tangent7& xi) {
  return sim3_right_jacobian(xi).partialPivLu().inverse();
}

Sim3 estimate_relative_sim3(std::span<const Eigen::Vector3d> src,
                            std::span<const Eigen::Vector3d> dst,
                            std::span<const double> weights, bool with_scale) {
  if (src.size() != dst.size() || (!weights.empty() && weights.size() != src.size())) {
    throw Error(ErrorCode::DimensionMismatch, "correspondence lists differ in length");
  }
  if (src.size() < 3) {
    throw Error(ErrorCode::DegenerateInput, "similarity alignment needs at least 3 points");
  }
  const auto w_at = [&](std::size_t k) { return weights.empty() ? 1.0 : weights[k]; };

  double wsum = 0.0;
  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero();
  Eigen::Vector3d mu_d = Eigen::Vector3d::Zero();
  for (std::size_t k = 0; k < src.size(); ++k) {
    wsum += w_at(k);
    mu_s += w_at(k) * src[k];
    mu_d += w_at(k) * dst[k];
  }
  if (!(wsum > 0.0)) throw Error(ErrorCode::DegenerateInput, "weights sum to zero");
  mu_s /= wsum;
  mu_d /= wsum;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  double var_s = 0.0;
  for (std::size_t k = 0; k < src.size(); ++k) {
    const Eigen::Vector3d ds = src[k] - mu_s;
    const Eigen::Vector3d dd = dst[k] - mu_d;
    cov += w_at(k) * dd * ds.transpose();
    scatter += w_at(k) * ds * ds.transpose();
    var_s += w_at(k) * ds.squaredNorm();
  }
  cov /= wsum;
  scatter /= wsum;
  var_s /= wsum;

  Eigen::JacobiSVD<Eigen::Matrix3d> spread(scatter);
  const Eigen::Vector3d sv = spread.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) {
    throw Error(ErrorCode::DegenerateInput, "source points are collinear");
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) S(2, 2) = -1.0;
  const Eigen::Matrix3d R = svd.matrixU() * S * svd.matrixV().transpose();
  const double scale =
      with_scale ? (svd.singularValues().asDiagonal() * S).trace() / var_s : 1.0;
  const Eigen::Vector3d t = mu_d - scale * R * mu_s;
  return {R, t, scale};
}

double alignment_rms(const Sim3& T, std::span<const Eigen::Vector3d> src,
                     std::span<const Eigen::Vector3d> dst) {
  if (src.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < src.size(); ++k) acc += (dst[k] - T * src[k]).squaredNorm();
  return std::sqrt(acc / static_cast<double>(src.size()));
}

}  // namespace demslam
