#pragma once

// Loss-spike handling: robust detection over a rolling window (median + MAD,
// so the spike itself cannot poison the statistics), narrow/wide
// classification by consecutive run length, skip-and-retry actions, and
// random re-injection of skipped batches into the upcoming schedule.
//
// Policy: narrow spikes proceed (minimal impact); the first wide spike on a
// batch skips the update and enqueues the batch for retry; a wide spike on
// the retry proceeds with the learning rate backed off for that step only.
// Non-finite losses classify as wide immediately and never reach the
// optimizer.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "moesim/rng.hpp"
#include "moesim/stats.hpp"

namespace moesim {

enum class SpikeClass { Normal, NarrowSpike, WideSpike };
enum class SpikeAction { Proceed, SkipAndRetry, SkipRetryAndBackoff };

inline const char* to_string(SpikeClass c) {
    switch (c) {
        case SpikeClass::Normal: return "normal";
        case SpikeClass::NarrowSpike: return "narrow_spike";
        default: return "wide_spike";
    }
}

inline const char* to_string(SpikeAction a) {
    switch (a) {
        case SpikeAction::Proceed: return "proceed";
        case SpikeAction::SkipAndRetry: return "skip_and_retry";
        default: return "skip_retry_and_backoff";
    }
}

struct SpikeConfig {
    std::int64_t window = 64;        // K most recent non-spike losses
    double narrow_k = 4.0;           // spike iff loss > median + narrow_k * MAD
    std::int64_t wide_run_len = 3;   // consecutive spikes before "wide"
    std::int64_t min_samples = 8;    // observations before any classification
    double backoff_factor = 0.5;     // lr scale for the affected step
    std::int64_t reinject_horizon = 50;  // R: retry lands within the next R steps
};

struct SpikeDetector {
    SpikeConfig cfg;
    std::deque<double> window;
    std::int64_t consecutive_spikes = 0;

    /// Classify one loss and update the rolling statistics. The window is
    /// updated with non-spike losses only.
    SpikeClass observe(double loss) {
        if (!std::isfinite(loss)) {
            ++consecutive_spikes;
            return SpikeClass::WideSpike;
        }
        if (static_cast<std::int64_t>(window.size()) < cfg.min_samples) {
            push(loss);
            consecutive_spikes = 0;
            return SpikeClass::Normal;
        }
        std::vector<double> w(window.begin(), window.end());
        const double med = median(w);
        const double spread = mad(w);
        if (loss > med + cfg.narrow_k * spread) {
            ++consecutive_spikes;
            return consecutive_spikes >= cfg.wide_run_len ? SpikeClass::WideSpike
                                                          : SpikeClass::NarrowSpike;
        }
        consecutive_spikes = 0;
        push(loss);
        return SpikeClass::Normal;
    }

   private:
    void push(double loss) {
        window.push_back(loss);
        while (static_cast<std::int64_t>(window.size()) > cfg.window) window.pop_front();
    }
};

/// Decide what the training loop does with the current update.
/// `is_retry` marks a batch previously skipped and re-injected;
/// `loss_finite` lets a non-finite retry be skipped instead of applied.
inline SpikeAction on_spike(SpikeClass cls, bool is_retry, bool loss_finite = true) {
    if (cls != SpikeClass::WideSpike) return SpikeAction::Proceed;
    if (!is_retry) return SpikeAction::SkipAndRetry;
    // Retry spiked as well: stop retrying; apply the update with the backed-
    // off learning rate. A non-finite retry can never be applied and is
    // dropped by the trainer instead.
    return loss_finite ? SpikeAction::SkipRetryAndBackoff : SpikeAction::SkipAndRetry;
}

struct PendingBatch {
    std::int64_t batch_id = 0;
    std::int64_t original_step = 0;
};

struct RetryQueue {
    std::vector<PendingBatch> pending;

    void enqueue(std::int64_t batch_id, std::int64_t step) { pending.push_back({batch_id, step}); }
    bool empty() const { return pending.empty(); }
};

/// Insert every pending batch at a uniformly chosen offset within the next R
/// positions of `upcoming` (1-based offsets in [1, R], clamped to the end of
/// the schedule). Returns the drawn offsets, in queue order. Deterministic
/// given the stream.
template <typename BatchT>
std::vector<std::int64_t> reinject(RetryQueue& queue, std::vector<BatchT>& upcoming,
                                   RngStream& rng, std::int64_t horizon,
                                   const std::function<BatchT(const PendingBatch&)>& make_retry) {
    std::vector<std::int64_t> offsets;
    if (horizon < 1) throw invalid_input("reinject: horizon must be >= 1");
    for (const PendingBatch& pb : queue.pending) {
        const std::int64_t offset =
            1 + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(horizon)));
        offsets.push_back(offset);
        const std::size_t at = std::min(static_cast<std::size_t>(offset), upcoming.size());
        upcoming.insert(upcoming.begin() + static_cast<std::ptrdiff_t>(at), make_retry(pb));
    }
    queue.pending.clear();
    return offsets;
}

}  // namespace moesim
