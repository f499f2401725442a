#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <vector>

#include "dtmap/mapgraph.hpp"
#include "dtmap/rng.hpp"

namespace dtmap {

/// Sliding-window co-visibility model: frame i sees points [i·stride, i·stride + window)
/// modulo `universe`, each point independently replaced by a uniform random point with
/// probability `jitter`.
struct SynthParams {
  std::size_t universe = 2000;
  std::size_t window = 150;
  std::size_t stride = 12;
  double jitter = 0.05;

  void validate() const;
};

/// Point set of synthetic frame `index`.
std::vector<PointId> synth_generate(const SynthParams& p, std::uint64_t index, Rng& rng);

class FrameSource {
 public:
  virtual ~FrameSource() = default;
  /// The next `count` frames, tagged with `slot`. Throws std::runtime_error when exhausted.
  virtual std::vector<FramePtr> next_slot_frames(std::size_t count, std::int64_t slot) = 0;
};

class SyntheticFrameSource final : public FrameSource {
 public:
  SyntheticFrameSource(SynthParams params, Rng rng);
  std::vector<FramePtr> next_slot_frames(std::size_t count, std::int64_t slot) override;

 private:
  SynthParams params_;
  Rng rng_;
  FrameId next_id_ = 0;
};

/// Tab-separated frame list: `<frame_id>\t<point_id>,<point_id>,...` per line,
/// ids strictly increasing, `#` lines ignored.
struct FrameRecord {
  FrameId id = 0;
  std::vector<PointId> points;
};

/// Throws std::runtime_error with the offending line number on malformed input.
std::vector<FrameRecord> read_frame_file(std::istream& in);
std::vector<FrameRecord> read_frame_file(const std::filesystem::path& path);
void write_frame_file(std::ostream& out, const std::vector<FrameRecord>& frames);

class FileFrameSource final : public FrameSource {
 public:
  explicit FileFrameSource(std::vector<FrameRecord> frames);
  explicit FileFrameSource(const std::filesystem::path& path);

  std::vector<FramePtr> next_slot_frames(std::size_t count, std::int64_t slot) override;
  std::size_t remaining() const { return frames_.size() - cursor_; }

 private:
  std::vector<FrameRecord> frames_;
  std::size_t cursor_ = 0;
};

}  // namespace dtmap
