#pragma once

#include <torch/torch.h>

#include "dsba/losses.hpp"
#include "dsba/models.hpp"
#include "dsba/scheduler.hpp"

// Straight-loop recomputations of every loss, written against plain accessors so they
// share no tensor code with the library implementation.
namespace dsba::oracle {

double cosine(const torch::Tensor& a, const torch::Tensor& b);
double alignment(const torch::Tensor& bd, const torch::Tensor& tgt, const torch::Tensor& cbd,
                 const torch::Tensor& cref, double lambda);
/// Uses the tap network for features and bilinear resizing; the cosine and weighting are looped.
double perceptual(const torch::Tensor& x, const torch::Tensor& xp, const PerceptualTaps& taps, bool multiscale);
double js_soft_histogram(const torch::Tensor& a, const torch::Tensor& b, int bins = 32);
double distribution(const torch::Tensor& c, const torch::Tensor& p, double lambda_js, double lambda_stat);
double effectiveness(const torch::Tensor& bd, const torch::Tensor& tgt, const torch::Tensor& t0,
                     const torch::Tensor& t1, const LossCoefficients& k);
double ssim(const torch::Tensor& x, const torch::Tensor& y);
double stealth(const torch::Tensor& x, const torch::Tensor& delta, double alpha, double beta);
double dft_l1(const torch::Tensor& channel);  // [H,W], naive DFT
double constraint(const torch::Tensor& delta, const LossCoefficients& k);
double outer(double align, double perc, double dist, const Triple& omega);
double inner(double eff, double ste, double cons, const Triple& mu);

}  // namespace dsba::oracle
