#pragma once

// Iteration-time degradation detector driven by dataloader-next /
// optimizer-step markers.
//
// LEARNING: candidate sequences run from a Next that follows a Step (or the
// stream start) through the last Step before the next such Next. After M
// identical consecutive candidates the sequence is learned.
// MATCHING: each completed match records an iteration duration (first Next
// to last Step). Slowdown fires when the mean of the last N durations
// exceeds (1 + p) x the smallest duration of this matching episode. Blocked
// fires from tick() when a match is in progress and the idle gap reaches
// blocked_multiplier x mean duration. K consecutive events without a
// completed match send the detector back to LEARNING.

#include <cstdint>
#include <deque>
#include <numeric>
#include <optional>
#include <string_view>
#include <vector>

#include "fbdiag/error.hpp"
#include "fbdiag/trace_model.hpp"

namespace fbdiag {

enum class MarkerKind : std::uint8_t { DataloaderNext, OptimizerStep };

inline std::string_view marker_code(MarkerKind k) {
  return k == MarkerKind::DataloaderNext ? "next" : "step";
}

struct MarkerEvent {
  MarkerKind kind = MarkerKind::DataloaderNext;
  Nanos ts = 0;

  friend bool operator==(const MarkerEvent&, const MarkerEvent&) = default;
};

struct DetectorConfig {
  std::size_t learn_repetitions = 10;   // M
  std::size_t recent_window = 50;       // N
  std::size_t relearn_after = 200;      // K
  double slowdown_percent = 5.0;
  double blocked_multiplier = 5.0;
  Nanos cooldown = 600'000'000'000;     // 10 minutes between triggers
  std::size_t max_candidate_length = 4096;
};

enum class DetectorState : std::uint8_t { Learning, Matching };

enum class TriggerKind : std::uint8_t { Slowdown, Blocked };

inline std::string_view trigger_code(TriggerKind k) {
  return k == TriggerKind::Slowdown ? "slowdown" : "blocked";
}

struct Trigger {
  TriggerKind kind = TriggerKind::Slowdown;
  Nanos at = 0;
  double mean_duration_ns = 0.0;
  Nanos recent_min_ns = 0;  // Slowdown evidence
  Nanos gap_ns = 0;         // Blocked evidence
};

enum class Transition : std::uint8_t { None, Learned, Relearning };

struct FeedResult {
  Transition transition = Transition::None;
  std::optional<Trigger> trigger;
};

struct IterationModel {
  std::vector<MarkerKind> sequence;
  std::size_t confirmed_count = 0;
  std::deque<Nanos> recent_durations;
  std::optional<Nanos> recent_min;
  std::size_t unmatched_events = 0;
};

class DegradationDetector {
 public:
  explicit DegradationDetector(DetectorConfig config = {}) : config_(config) {}

  DetectorState state() const { return state_; }
  const IterationModel& model() const { return model_; }
  const DetectorConfig& config() const { return config_; }
  std::size_t completed_iterations() const { return completed_; }

  double mean_duration() const {
    if (model_.recent_durations.empty()) return 0.0;
    double sum = std::accumulate(model_.recent_durations.begin(), model_.recent_durations.end(), 0.0);
    return sum / static_cast<double>(model_.recent_durations.size());
  }

  FeedResult feed(const MarkerEvent& ev) {
    if (last_ts_ && ev.ts < *last_ts_) {
      throw Error(ErrorKind::OutOfOrderEvent, "marker at " + std::to_string(ev.ts) +
                                                  " precedes previous marker at " +
                                                  std::to_string(*last_ts_));
    }
    last_ts_ = ev.ts;
    blocked_reported_ = false;
    return state_ == DetectorState::Learning ? feed_learning(ev) : feed_matching(ev);
  }

  // Blocked probe; fires at most once per idle gap.
  std::optional<Trigger> tick(Nanos now) {
    if (state_ != DetectorState::Matching || model_.recent_durations.empty()) return std::nullopt;
    if (match_pos_ == 0 || blocked_reported_ || !last_ts_) return std::nullopt;
    const double mean = mean_duration();
    const Nanos gap = now - *last_ts_;
    if (static_cast<double>(gap) < config_.blocked_multiplier * mean) return std::nullopt;
    blocked_reported_ = true;
    Trigger t{TriggerKind::Blocked, now, mean, model_.recent_min.value_or(0), gap};
    if (!admit(t)) return std::nullopt;
    return t;
  }

 private:
  FeedResult feed_learning(const MarkerEvent& ev) {
    FeedResult r;
    if (ev.kind == MarkerKind::DataloaderNext) {
      if (!candidate_.empty() && candidate_.back() == MarkerKind::OptimizerStep) {
        close_candidate();
      }
      if (candidate_.size() < config_.max_candidate_length) candidate_.push_back(ev.kind);
      return r;
    }
    if (candidate_.empty()) return r;  // a sequence must start with Next
    if (candidate_.size() < config_.max_candidate_length) candidate_.push_back(ev.kind);
    // The M-th repetition is accepted as soon as it matches the previous ones.
    if (candidate_ == previous_ && repeats_ + 1 >= config_.learn_repetitions) {
      enter_matching(candidate_);
      r.transition = Transition::Learned;
    }
    return r;
  }

  void close_candidate() {
    if (candidate_ == previous_) {
      ++repeats_;
    } else {
      previous_ = candidate_;
      repeats_ = 1;
    }
    candidate_.clear();
  }

  void enter_matching(const std::vector<MarkerKind>& seq) {
    state_ = DetectorState::Matching;
    model_ = IterationModel{};
    model_.sequence = seq;
    model_.confirmed_count = config_.learn_repetitions;
    match_pos_ = 0;
    candidate_.clear();
    previous_.clear();
    repeats_ = 0;
  }

  void enter_learning() {
    state_ = DetectorState::Learning;
    model_ = IterationModel{};
    match_pos_ = 0;
    candidate_.clear();
    previous_.clear();
    repeats_ = 0;
  }

  FeedResult feed_matching(const MarkerEvent& ev) {
    FeedResult r;
    const auto& seq = model_.sequence;
    bool completed = false;
    if (ev.kind == seq[match_pos_]) {
      if (match_pos_ == 0) iteration_start_ = ev.ts;
      ++match_pos_;
      if (match_pos_ == seq.size()) {
        completed = true;
        match_pos_ = 0;
      }
    } else if (ev.kind == seq[0]) {
      // A new iteration starts before the previous one completed.
      iteration_start_ = ev.ts;
      match_pos_ = 1;
    } else {
      match_pos_ = 0;
    }

    if (!completed) {
      if (++model_.unmatched_events >= config_.relearn_after) {
        enter_learning();
        r.transition = Transition::Relearning;
      }
      return r;
    }

    model_.unmatched_events = 0;
    ++completed_;
    const Nanos duration = ev.ts - iteration_start_;
    model_.recent_durations.push_back(duration);
    if (model_.recent_durations.size() > config_.recent_window) model_.recent_durations.pop_front();
    if (!model_.recent_min || duration < *model_.recent_min) model_.recent_min = duration;

    if (model_.recent_durations.size() >= config_.recent_window) {
      const double mean = mean_duration();
      const double limit = (1.0 + config_.slowdown_percent / 100.0) *
                           static_cast<double>(*model_.recent_min);
      if (mean > limit) {
        Trigger t{TriggerKind::Slowdown, ev.ts, mean, *model_.recent_min, 0};
        if (admit(t)) r.trigger = t;
      }
    }
    return r;
  }

  bool admit(const Trigger& t) {
    if (last_trigger_ && t.at - *last_trigger_ < config_.cooldown) return false;
    last_trigger_ = t.at;
    return true;
  }

  DetectorConfig config_;
  DetectorState state_ = DetectorState::Learning;
  IterationModel model_;
  std::vector<MarkerKind> candidate_;
  std::vector<MarkerKind> previous_;
  std::size_t repeats_ = 0;
  std::size_t match_pos_ = 0;
  Nanos iteration_start_ = 0;
  std::optional<Nanos> last_ts_;
  std::optional<Nanos> last_trigger_;
  bool blocked_reported_ = false;
  std::size_t completed_ = 0;
};

}  // namespace fbdiag
