// SPDX-License-Identifier: Apache-2.0
//
// Dual-teacher information distillation: tap selection, per-teacher adapter
// networks mapping student maps into each teacher's domain, and the per-channel
// log-variance table shared by both teachers.

#pragma once

#include <filesystem>
#include <vector>

#include "dtcil/backbone.hpp"
#include "dtcil/losses.hpp"

namespace dtcil::dtid {

using nn::Mode;
using nn::Param;
using nn::ParamList;

/// Stage-group indices whose output maps are distilled.
struct TapSelection {
  std::vector<int> stage_ids;
  int size() const { return static_cast<int>(stage_ids.size()); }
  bool operator==(const TapSelection&) const = default;
};

/// Ends of every residual stage group except the first.
TapSelection select_taps(const model::BackboneConfig& cfg);

/// Maps at the selected taps. Teacher collection runs in evaluation mode and the returned maps are
/// copies with no link back into the model; student maps come from a caller-owned forward pass.
std::vector<Tensor> collect_maps(model::Classifier& teacher, const TapSelection& taps, const Tensor& images);
std::vector<Tensor> select_maps(const std::vector<Tensor>& stage_maps, const TapSelection& taps);

/// Three 1x1 convolutions; the first two double the width and carry BN + ReLU, the last is linear.
class VariationalAdapter {
 public:
  VariationalAdapter() = default;
  VariationalAdapter(int in_ch, int out_ch, nn::Rng& rng, const std::string& name);

  Tensor forward(const Tensor& s, Mode mode);
  Tensor backward(const Tensor& dy);
  void params(ParamList& out);
  void buffers(std::vector<Tensor*>& out);
  int hidden_width() const { return c1_.out_channels(); }
  int out_channels() const { return c3_.out_channels(); }

 private:
  nn::Conv2d c1_, c2_, c3_;
  nn::BatchNorm2d b1_, b2_;
  nn::ReLU r1_, r2_;
};

class DTIDState {
 public:
  DTIDState() = default;
  /// `teacher_channels[k]` is the teacher map width at tap k; student widths default to the same.
  DTIDState(TapSelection taps, std::vector<int> teacher_channels, int n_teachers, std::uint64_t seed,
            std::vector<int> student_channels = {});

  struct Step {
    double value = 0;
    std::vector<Tensor> d_student;  // per tap
  };

  /// Applies the adapters to the student maps, evaluates the loss against every teacher's maps
  /// ([teacher][tap]) and accumulates gradients into adapters and the log-variance table.
  Step loss_and_backward(const std::vector<std::vector<Tensor>>& teacher_maps, const std::vector<Tensor>& student_maps,
                         Mode mode = Mode::Train);

  ParamList params();
  std::vector<Tensor*> buffers();
  const TapSelection& taps() const { return taps_; }
  int n_teachers() const { return n_teachers_; }
  VariationalAdapter& adapter(int teacher, int tap) { return adapters_.at(teacher).at(tap); }
  const Param& log_variance(int tap) const { return log_var_.at(tap); }
  Param& log_variance(int tap) { return log_var_.at(tap); }
  double sigma2(int tap, int channel) const;

  void save(const std::filesystem::path& path);

 private:
  TapSelection taps_;
  int n_teachers_ = 0;
  std::vector<std::vector<VariationalAdapter>> adapters_;  // [teacher][tap]
  std::vector<Param> log_var_;                             // [tap], shape [C]
};

DTIDState init_dtid_state(const TapSelection& taps, const std::vector<int>& teacher_channels, int n_teachers = 2,
                          std::uint64_t seed = 1);

}  // namespace dtcil::dtid
