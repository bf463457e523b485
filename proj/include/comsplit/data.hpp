#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "comsplit/rng.hpp"
#include "comsplit/tensor.hpp"

namespace comsplit {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Affine map onto [-1, 1] fitted on a [min, max] range.
struct Scaler {
    double min = 0.0;
    double max = 1.0;

    double normalize(double x) const { return 2.0 * (x - min) / (max - min) - 1.0; }
    double denormalize(double y) const { return (y + 1.0) * (max - min) / 2.0 + min; }
    // MSE in the normalized domain times this factor is MSE in the raw domain.
    double mse_factor() const { return (max - min) * (max - min) / 4.0; }
};

struct SplitRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool empty() const { return begin == end; }
};

// Windowed, normalized, chronologically split series. Instance k has as
// features the `window` normalized values preceding its label:
// features = normalized[k .. k+window), label = normalized[k+window].
struct SeriesDataset {
    std::string name;
    std::vector<double> raw;
    std::vector<double> normalized;
    std::size_t window = 30;
    Scaler scaler;
    SplitRange train, val, test;

    std::size_t instance_count() const { return raw.size() - window; }
    double feature(std::size_t instance, std::size_t i) const { return normalized[instance + i]; }
    double label(std::size_t instance) const { return normalized[instance + window]; }

    // Leaf batch tensors: x [n x window], y [n x 1].
    std::pair<Tensor, Tensor> batch(const std::vector<std::size_t>& instances) const {
        const std::size_t n = instances.size();
        std::vector<double> xs(n * window);
        std::vector<double> ys(n);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t i = 0; i < window; ++i) xs[r * window + i] = feature(instances[r], i);
            ys[r] = label(instances[r]);
        }
        return {Tensor::from({n, window}, std::move(xs)), Tensor::from({n, 1}, std::move(ys))};
    }

    std::pair<Tensor, Tensor> batch(const SplitRange& range) const {
        std::vector<std::size_t> idx(range.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = range.begin + i;
        return batch(idx);
    }
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_line(const std::string& line, char delim) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, delim)) cells.push_back(cell);
    if (!line.empty() && line.back() == delim) cells.push_back("");
    return cells;
}

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace detail

// Ordered real series from one column of a headered CSV. Rows must already
// be ordered by date; any unparseable cell aborts with its location.
inline std::vector<double> load_series_csv(const std::string& path, const std::string& column,
                                           char delimiter = ',') {
    std::ifstream is(path);
    if (!is) throw IoError("load_series_csv: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw IoError("load_series_csv: empty file " + path);
    const auto header = detail::split_line(detail::strip_cr(line), delimiter);
    std::size_t col = header.size();
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == column) {
            col = i;
            break;
        }
    }
    if (col == header.size()) {
        std::string available;
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) available += ", ";
            available += header[i];
        }
        throw IoError("load_series_csv: column '" + column + "' not found in " + path +
                      " (available: " + available + ")");
    }
    std::vector<double> series;
    std::size_t row = 1;  // header is row 1
    while (std::getline(is, line)) {
        ++row;
        line = detail::strip_cr(line);
        if (line.empty()) continue;
        const auto cells = detail::split_line(line, delimiter);
        if (col >= cells.size()) {
            throw ParseError("load_series_csv: row " + std::to_string(row) + " has " +
                             std::to_string(cells.size()) + " cells, column '" + column +
                             "' needs " + std::to_string(col + 1));
        }
        const std::string& cell = cells[col];
        std::size_t consumed = 0;
        double value = 0.0;
        try {
            value = std::stod(cell, &consumed);
        } catch (const std::exception&) {
            consumed = 0;
        }
        if (consumed != cell.size() || cell.empty()) {
            throw ParseError("load_series_csv: row " + std::to_string(row) + ", column '" +
                             column + "': cannot parse '" + cell + "' as a number");
        }
        series.push_back(value);
    }
    return series;
}

// ---------------------------------------------------------------------------
// Windowing, normalization, splitting
// ---------------------------------------------------------------------------

inline std::size_t window_count(std::size_t series_length, std::size_t window) {
    if (series_length <= window) {
        throw ContractError("window: series length " + std::to_string(series_length) +
                            " <= window " + std::to_string(window));
    }
    return series_length - window;
}

// Largest-remainder allocation of n instances over three ordered fractions;
// ties on the fractional part go to the earlier split.
inline std::array<std::size_t, 3> split_counts(std::size_t n,
                                               const std::array<double, 3>& fractions) {
    double total = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ContractError("split: negative fraction " + std::to_string(f));
        total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw ContractError("split: fractions sum to " + std::to_string(total) + ", expected 1");
    }
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> frac{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        frac[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    std::size_t remainder = n - assigned;
    while (remainder > 0) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < 3; ++i) {
            if (frac[i] > frac[best] + 1e-12) best = i;
        }
        counts[best] += 1;
        frac[best] = -1.0;
        --remainder;
    }
    return counts;
}

inline Scaler fit_scaler(const std::vector<double>& series, std::size_t begin, std::size_t end) {
    if (begin >= end || end > series.size()) throw ContractError("fit_scaler: empty fit range");
    double lo = series[begin], hi = series[begin];
    for (std::size_t i = begin; i < end; ++i) {
        lo = std::min(lo, series[i]);
        hi = std::max(hi, series[i]);
    }
    if (hi <= lo) {
        throw ContractError("fit_scaler: constant series on fit range (min == max == " +
                            std::to_string(lo) + ")");
    }
    return Scaler{lo, hi};
}

// Windows, splits chronologically, and normalizes. The scaler is fitted only
// on the raw values visible to training instances (the series prefix
// [0, window + n_train)); later splits may leave [-1, 1].
inline SeriesDataset make_dataset(std::string name, std::vector<double> raw,
                                  std::size_t window = 30,
                                  const std::array<double, 3>& fractions = {0.6, 0.1, 0.3}) {
    SeriesDataset ds;
    ds.name = std::move(name);
    ds.window = window;
    const std::size_t instances = window_count(raw.size(), window);
    const auto counts = split_counts(instances, fractions);
    ds.train = {0, counts[0]};
    ds.val = {counts[0], counts[0] + counts[1]};
    ds.test = {counts[0] + counts[1], instances};
    ds.scaler = fit_scaler(raw, 0, window + counts[0]);
    ds.normalized.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) ds.normalized[i] = ds.scaler.normalize(raw[i]);
    ds.raw = std::move(raw);
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic series
// ---------------------------------------------------------------------------

struct SynthParams {
    double phi = 0.95;    // ar1 coefficient
    double sigma = 0.05;  // ar1 innovation stddev
    double x0 = 0.0;      // ar1 initial value
};

inline std::vector<double> synth_series(const std::string& kind, std::size_t length,
                                        const SynthParams& params, std::uint64_t seed) {
    if (length <= 31) throw ContractError("synth_series: length must exceed 31");
    Rng rng(seed);
    std::vector<double> out(length);
    if (kind == "ar1") {
        double x = params.x0;
        for (std::size_t t = 0; t < length; ++t) {
            x = params.phi * x + rng.normal(0.0, params.sigma);
            out[t] = x;
        }
    } else if (kind == "sine_noise") {
        constexpr double period = 50.0;
        for (std::size_t t = 0; t < length; ++t) {
            out[t] = std::sin(2.0 * M_PI * static_cast<double>(t) / period) + 0.1 * rng.normal();
        }
    } else {
        throw ContractError("synth_series: unknown kind '" + kind + "'");
    }
    return out;
}

// Alternating blocks of `block` training instances per device.
inline std::vector<std::vector<std::size_t>> partition_blocks(const SplitRange& train,
                                                              std::size_t devices,
                                                              std::size_t block = 64) {
    if (devices == 0) throw ContractError("partition_blocks: zero devices");
    std::vector<std::vector<std::size_t>> parts(devices);
    std::size_t device = 0;
    for (std::size_t i = train.begin; i < train.end; i += block) {
        const std::size_t hi = std::min(i + block, train.end);
        for (std::size_t j = i; j < hi; ++j) parts[device].push_back(j);
        device = (device + 1) % devices;
    }
    return parts;
}

// Dataset provenance manifest (flat key = value lines).
inline void write_dataset_manifest(const std::string& path, const SeriesDataset& ds,
                                   const std::string& source, const std::string& column,
                                   const std::array<double, 3>& fractions) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("write_dataset_manifest: cannot open " + path);
    os.precision(17);
    os << "name = " << ds.name << '\n'
       << "source = " << source << '\n'
       << "column = " << column << '\n'
       << "series_length = " << ds.raw.size() << '\n'
       << "window = " << ds.window << '\n'
       << "instances = " << ds.instance_count() << '\n'
       << "fractions = " << fractions[0] << ' ' << fractions[1] << ' ' << fractions[2] << '\n'
       << "train = [" << ds.train.begin << ", " << ds.train.end << ")\n"
       << "val = [" << ds.val.begin << ", " << ds.val.end << ")\n"
       << "test = [" << ds.test.begin << ", " << ds.test.end << ")\n"
       << "scaler_min = " << ds.scaler.min << '\n'
       << "scaler_max = " << ds.scaler.max << '\n';
}

inline void write_series_csv(const std::string& path, const std::vector<double>& series,
                             const std::string& column = "value") {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("write_series_csv: cannot open " + path);
    os.precision(17);
    os << "index," << column << '\n';
    for (std::size_t i = 0; i < series.size(); ++i) os << i << ',' << series[i] << '\n';
}

}  // namespace comsplit
