#include "dtmap/data.hpp"

#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dtmap {

void SynthParams::validate() const {
  if (universe == 0) throw std::invalid_argument("SynthParams: universe must be positive");
  if (window == 0 || window > universe) throw std::invalid_argument("SynthParams: need 0 < window <= universe");
  if (!(jitter >= 0.0 && jitter <= 1.0)) throw std::invalid_argument("SynthParams: jitter must be in [0,1]");
}

std::vector<PointId> synth_generate(const SynthParams& p, std::uint64_t index, Rng& rng) {
  p.validate();
  std::vector<PointId> pts;
  pts.reserve(p.window);
  const std::uint64_t start = (index * p.stride) % p.universe;
  for (std::size_t j = 0; j < p.window; ++j) {
    PointId id = (start + j) % p.universe;
    if (p.jitter > 0.0 && rng.bernoulli(p.jitter)) id = rng.index(p.universe);
    pts.push_back(id);
  }
  return pts;
}

SyntheticFrameSource::SyntheticFrameSource(SynthParams params, Rng rng) : params_(params), rng_(std::move(rng)) {
  params_.validate();
}

std::vector<FramePtr> SyntheticFrameSource::next_slot_frames(std::size_t count, std::int64_t slot) {
  std::vector<FramePtr> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i, ++next_id_) {
    out.push_back(make_frame(next_id_, synth_generate(params_, next_id_, rng_), slot));
  }
  return out;
}

namespace {

template <class T>
T parse_uint(std::string_view s, std::size_t line) {
  T v{};
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (s.empty() || ec != std::errc{} || ptr != end) {
    throw std::runtime_error("frame file line " + std::to_string(line) + ": bad integer '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace

std::vector<FrameRecord> read_frame_file(std::istream& in) {
  std::vector<FrameRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw std::runtime_error("frame file line " + std::to_string(lineno) + ": expected '<id>\\t<points>'");
    }
    FrameRecord rec;
    rec.id = parse_uint<FrameId>(std::string_view(line).substr(0, tab), lineno);
    std::string_view rest = std::string_view(line).substr(tab + 1);
    while (true) {
      const auto comma = rest.find(',');
      rec.points.push_back(parse_uint<PointId>(rest.substr(0, comma), lineno));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (!out.empty() && rec.id <= out.back().id) {
      throw std::runtime_error("frame file line " + std::to_string(lineno) + ": frame ids must increase");
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<FrameRecord> read_frame_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open frame file " + path.string());
  return read_frame_file(in);
}

void write_frame_file(std::ostream& out, const std::vector<FrameRecord>& frames) {
  for (const auto& f : frames) {
    out << f.id << '\t';
    for (std::size_t i = 0; i < f.points.size(); ++i) {
      if (i) out << ',';
      out << f.points[i];
    }
    out << '\n';
  }
}

FileFrameSource::FileFrameSource(std::vector<FrameRecord> frames) : frames_(std::move(frames)) {}

FileFrameSource::FileFrameSource(const std::filesystem::path& path) : FileFrameSource(read_frame_file(path)) {}

std::vector<FramePtr> FileFrameSource::next_slot_frames(std::size_t count, std::int64_t slot) {
  if (remaining() < count) {
    throw std::runtime_error("frame file exhausted: " + std::to_string(remaining()) + " frames left, " +
                             std::to_string(count) + " requested");
  }
  std::vector<FramePtr> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i, ++cursor_) {
    out.push_back(make_frame(frames_[cursor_].id, frames_[cursor_].points, slot));
  }
  return out;
}

}  // namespace dtmap
