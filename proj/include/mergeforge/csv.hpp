#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace mergeforge {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
}

// Minimal CSV emitter: one header row, stable column order, deterministic
// number formatting.
class CsvWriter {
public:
    explicit CsvWriter(const std::string& path) : f_(path, std::ios::trunc) {
        if (!f_) throw std::runtime_error("csv: cannot open '" + path + "' for writing");
    }

    void header(const std::vector<std::string>& cols) { write_row(cols); }

    void row(const std::vector<std::string>& cells) { write_row(cells); }

private:
    void write_row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) f_ << ',';
            f_ << cells[i];
        }
        f_ << '\n';
    }

    std::ofstream f_;
};

}  // namespace mergeforge
