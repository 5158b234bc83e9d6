#pragma once

#include <functional>

#include "avatar/common.hpp"

namespace avatar {

// Linear-β variance schedule. Steps are 1-based: t ∈ [1, T], with ᾱ_0 := 1.
// All vectors are float64 with T+1 entries; index 0 holds the t=0 convention.
class DiffusionSchedule {
 public:
  static DiffusionSchedule linear(int steps, double beta_start, double beta_end);
  // IDDPM linear range rescaled to the step count (β from 1e-4·1000/T to 0.02·1000/T).
  static DiffusionSchedule iddpm_linear(int steps);

  int steps() const { return steps_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const;
  double alpha_bar(int t) const;
  // β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t); at t = 1 the clipped log uses β̃_2.
  double posterior_variance(int t) const;
  double posterior_log_variance_clipped(int t) const;
  double posterior_mean_coef1(int t) const;  // multiplies x0
  double posterior_mean_coef2(int t) const;  // multiplies x_t

  // Continuous-time view for the ODE solver: log ᾱ is interpolated linearly
  // between integer steps, t ∈ [0, T].
  double log_alpha_bar(double t) const;
  double log_alpha(double t) const { return 0.5 * log_alpha_bar(t); }
  double sigma(double t) const;
  double lambda(double t) const;  // log-SNR half: log α - log σ
  double time_for_lambda(double lambda) const;

  json to_json() const;
  static DiffusionSchedule from_json(const json& j);

 private:
  void check_step(int t) const;
  int steps_ = 0;
  double beta_start_ = 0, beta_end_ = 0;
  std::vector<double> betas_, alpha_bars_, post_var_, post_logvar_clipped_, coef1_, coef2_;
};

struct ModelPrediction {
  torch::Tensor eps;  // predicted noise, latent shape
  torch::Tensor v;    // variance interpolation in [0, 1], latent shape
};

// x_t = √ᾱ_t x0 + √(1-ᾱ_t) noise. `t` holds one step per batch element.
torch::Tensor q_sample(const DiffusionSchedule& s, const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& noise);
torch::Tensor q_sample(const DiffusionSchedule& s, const torch::Tensor& x0, int t, const torch::Tensor& noise);

// KL(N(μ1, e^{lv1}) ‖ N(μ2, e^{lv2})), elementwise.
torch::Tensor gaussian_kl(const torch::Tensor& mean1, const torch::Tensor& logvar1, const torch::Tensor& mean2,
                          const torch::Tensor& logvar2);

struct IddpmLoss {
  torch::Tensor l_simple;  // mean squared noise error
  torch::Tensor l_vlb;     // mean per-element KL(q(x_{t-1}|x_t,x0) ‖ p_θ), mean path detached
  torch::Tensor total;
};

IddpmLoss iddpm_loss(const DiffusionSchedule& s, const ModelPrediction& pred, const torch::Tensor& x0,
                     const torch::Tensor& x_t, const torch::Tensor& t, const torch::Tensor& noise,
                     double lambda_vlb = 0.001);

// Model variance log σ² = v log β_t + (1 - v) log β̃_t.
torch::Tensor model_log_variance(const DiffusionSchedule& s, const torch::Tensor& v, const torch::Tensor& t);

torch::Tensor cfg_combine(const torch::Tensor& eps_uncond, const torch::Tensor& eps_cond, double scale);

// Noise prediction for a batch at continuous step t (1 ≤ t ≤ T).
using EpsModel = std::function<torch::Tensor(const torch::Tensor& x, double t, bool conditional)>;

// Second-order multistep DPM-Solver on the probability-flow ODE over a grid
// uniform in log-SNR from T down to 1; the first step is first order. One
// model evaluation per step (two with guidance).
torch::Tensor dpm_solver_sample(const EpsModel& model, const DiffusionSchedule& s, int n_steps, double guidance,
                                const torch::Tensor& x_T);

// Time grid used by the solver (n_steps + 1 points, descending, λ-uniform).
std::vector<double> solver_timesteps(const DiffusionSchedule& s, int n_steps);

}  // namespace avatar
