#include "evalfrl/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace evalfrl::data {
namespace {

// minimal structural UTF-8 check; the reader refuses files that are not
// valid UTF-8 rather than guessing an encoding
bool valid_utf8(const std::string& bytes) {
  std::size_t i = 0;
  while (i < bytes.size()) {
    const unsigned char c = bytes[i];
    int extra;
    if (c < 0x80)
      extra = 0;
    else if ((c >> 5) == 0x6)
      extra = 1;
    else if ((c >> 4) == 0xE)
      extra = 2;
    else if ((c >> 3) == 0x1E)
      extra = 3;
    else
      return false;
    for (int k = 1; k <= extra; ++k) {
      if (i + k >= bytes.size() || (static_cast<unsigned char>(bytes[i + k]) >> 6) != 0x2)
        return false;
    }
    i += extra + 1;
  }
  return true;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cells.push_back(cur);
  return cells;
}

double parse_real(const std::string& cell, std::size_t row, const std::string& column) {
  double value = 0;
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end || cell.empty())
    throw ParseError("row " + std::to_string(row) + ", column '" + column +
                     "': not a real number: '" + cell + "'");
  if (!std::isfinite(value))
    throw ParseError("row " + std::to_string(row) + ", column '" + column +
                     "': non-finite value");
  return value;
}

int binarize(const std::string& cell, const std::string& positive,
             std::set<std::string>& seen, const std::string& column) {
  seen.insert(cell);
  if (seen.size() > 2)
    throw SchemaError("column '" + column + "' holds more than two distinct values");
  return cell == positive ? 1 : 0;
}

std::vector<int> shuffled_indices(int n, Rng& rng) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  rng.shuffle(idx);
  return idx;
}

double table_mi_bits(const std::vector<double>& pab, const std::vector<double>& pa,
                     const std::vector<double>& pb) {
  double mi = 0;
  const std::size_t nb = pb.size();
  for (std::size_t a = 0; a < pa.size(); ++a)
    for (std::size_t b = 0; b < nb; ++b) {
      const double p = pab[a * nb + b];
      if (p > 0) mi += p * std::log2(p / (pa[a] * pb[b]));
    }
  return mi;
}

}  // namespace

Dataset Dataset::subset(const std::vector<int>& rows) const {
  Dataset out;
  out.name = name;
  out.columns = columns;
  out.features.resize(long(rows.size()), features.cols());
  out.labels.reserve(rows.size());
  out.sensitive.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= n()) throw ShapeError("subset: row index out of range");
    out.features.row(long(i)) = features.row(r);
    out.labels.push_back(labels[r]);
    out.sensitive.push_back(sensitive[r]);
  }
  return out;
}

void Dataset::validate() const {
  if (n() < 2) throw ShapeError("dataset '" + name + "': fewer than 2 rows");
  if (int(labels.size()) != n() || int(sensitive.size()) != n())
    throw ShapeError("dataset '" + name + "': label/sensitive length mismatch");
  if (int(columns.size()) != d())
    throw ShapeError("dataset '" + name + "': column descriptor count mismatch");
  for (int v : labels)
    if (v != 0 && v != 1) throw ShapeError("dataset '" + name + "': non-binary label");
  for (int v : sensitive)
    if (v != 0 && v != 1) throw ShapeError("dataset '" + name + "': non-binary sensitive");
  for (int j = 0; j < d(); ++j) {
    if (columns[j].kind != ColumnKind::Categorical) continue;
    for (int i = 0; i < n(); ++i) {
      const double v = features(i, j);
      if (v != std::floor(v) || v < 0 || v >= double(columns[j].vocabulary.size()))
        throw ShapeError("dataset '" + name + "': categorical cell outside vocabulary");
    }
  }
}

Dataset load_dataset(const std::string& path, const Schema& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::stringstream buffer;
  buffer << in.rdbuf();
  std::string content = buffer.str();
  if (content.size() >= 3 && content.compare(0, 3, "\xEF\xBB\xBF") == 0)
    content.erase(0, 3);
  if (!valid_utf8(content)) throw ParseError("'" + path + "' is not valid UTF-8");

  std::vector<std::string> lines;
  std::string cur;
  for (char ch : content) {
    if (ch == '\n') {
      if (!cur.empty() && cur.back() == '\r') cur.pop_back();
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) {
    if (cur.back() == '\r') cur.pop_back();
    lines.push_back(cur);
  }
  if (lines.empty()) throw ParseError("'" + path + "': empty file");

  const std::vector<std::string> header = split_line(lines[0]);
  auto column_of = [&](const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
      throw SchemaError("column '" + name + "' missing from header of '" + path + "'");
    return int(it - header.begin());
  };

  std::vector<int> feature_cols;
  for (const ColumnSpec& col : schema.feature_columns)
    feature_cols.push_back(column_of(col.name));
  const int label_col = column_of(schema.label_column);
  const int sensitive_col = column_of(schema.sensitive_column);

  Dataset ds;
  ds.name = path;
  ds.columns = schema.feature_columns;
  const int d = int(schema.feature_columns.size());
  const std::size_t n = lines.size() - 1;
  ds.features.resize(long(n), d);

  // explicit vocabularies are closed; empty ones fill in first-appearance order
  std::vector<bool> closed_vocab(d);
  for (int j = 0; j < d; ++j)
    closed_vocab[j] = !ds.columns[j].vocabulary.empty();

  std::set<std::string> label_values, sensitive_values;
  for (std::size_t r = 0; r < n; ++r) {
    const std::vector<std::string> cells = split_line(lines[r + 1]);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(r) + ": expected " +
                       std::to_string(header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    for (const std::string& cell : cells)
      if (cell.empty()) throw ParseError("row " + std::to_string(r) + ": empty cell");

    for (int j = 0; j < d; ++j) {
      const std::string& cell = cells[feature_cols[j]];
      ColumnSpec& col = ds.columns[j];
      if (col.kind == ColumnKind::Continuous) {
        ds.features(long(r), j) = parse_real(cell, r, col.name);
      } else {
        auto it = std::find(col.vocabulary.begin(), col.vocabulary.end(), cell);
        if (it == col.vocabulary.end()) {
          if (closed_vocab[j])
            throw VocabularyError("row " + std::to_string(r) + ", column '" + col.name +
                                  "': value '" + cell + "' outside vocabulary");
          col.vocabulary.push_back(cell);
          it = std::prev(col.vocabulary.end());
        }
        ds.features(long(r), j) = double(it - col.vocabulary.begin());
      }
    }
    ds.labels.push_back(binarize(cells[label_col], schema.label_positive, label_values,
                                 schema.label_column));
    ds.sensitive.push_back(binarize(cells[sensitive_col], schema.sensitive_privileged,
                                    sensitive_values, schema.sensitive_column));
  }
  ds.validate();
  return ds;
}

std::vector<PreparedDataset> preprocess(const Dataset& train,
                                        const std::vector<Dataset>& apply_to) {
  if (train.n() == 0) throw ShapeError("preprocess: empty train set");
  const int d = train.d();

  std::vector<ColumnTransform> transform(d);
  int width = 0;
  for (int j = 0; j < d; ++j) {
    ColumnTransform& t = transform[j];
    t.kind = train.columns[j].kind;
    if (t.kind == ColumnKind::Continuous) {
      const auto col = train.features.col(j);
      t.mean = col.mean();
      t.stddev = std::sqrt((col.array() - t.mean).square().sum() / double(train.n()));
      width += 1;
    } else {
      t.vocabulary = train.columns[j].vocabulary;
      width += int(t.vocabulary.size());
    }
  }

  auto apply = [&](const Dataset& ds) {
    if (ds.d() != d) throw ShapeError("preprocess: column count mismatch");
    PreparedDataset out;
    out.labels = ds.labels;
    out.sensitive = ds.sensitive;
    out.transform = transform;
    out.features = Matrix::Zero(ds.n(), width);
    for (int i = 0; i < ds.n(); ++i) {
      int c = 0;
      for (int j = 0; j < d; ++j) {
        const ColumnTransform& t = transform[j];
        const double v = ds.features(i, j);
        if (t.kind == ColumnKind::Continuous) {
          out.features(i, c++) = t.stddev > 0 ? (v - t.mean) / t.stddev : 0.0;
        } else {
          const auto slot = std::llround(v);
          if (v != std::floor(v) || slot < 0 || slot >= long(t.vocabulary.size()))
            throw VocabularyError("preprocess: categorical value outside train vocabulary");
          out.features(i, c + int(slot)) = 1.0;
          c += int(t.vocabulary.size());
        }
      }
    }
    return out;
  };

  std::vector<PreparedDataset> result;
  result.push_back(apply(train));
  for (const Dataset& ds : apply_to) result.push_back(apply(ds));
  return result;
}

std::pair<Dataset, Dataset> holdout_split(const Dataset& ds, std::uint64_t seed,
                                          int iteration) {
  if (ds.n() < 3) throw ShapeError("holdout_split: need at least 3 rows");
  Rng rng(derive_seed(seed, "holdout_split", std::uint64_t(iteration)));
  const std::vector<int> idx = shuffled_indices(ds.n(), rng);
  const int train_n = (2 * ds.n() + 2) / 3;  // ceil(2n/3)
  std::vector<int> train_idx(idx.begin(), idx.begin() + train_n);
  std::vector<int> test_idx(idx.begin() + train_n, idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

std::vector<FoldIndices> kfold_indices(int n, int k, std::uint64_t seed) {
  if (k < 2) throw ShapeError("kfold: k must be at least 2");
  if (k > n) throw ShapeError("kfold: more folds than rows");
  Rng rng(derive_seed(seed, "kfold", std::uint64_t(k)));
  const std::vector<int> idx = shuffled_indices(n, rng);

  std::vector<FoldIndices> folds(k);
  int start = 0;
  for (int f = 0; f < k; ++f) {
    const int size = n / k + (f < n % k ? 1 : 0);
    folds[f].validate.assign(idx.begin() + start, idx.begin() + start + size);
    start += size;
  }
  for (int f = 0; f < k; ++f)
    for (int g = 0; g < k; ++g)
      if (g != f)
        folds[f].fit.insert(folds[f].fit.end(), folds[g].validate.begin(),
                            folds[g].validate.end());
  return folds;
}

std::vector<FoldIndices> kfold(const Dataset& train, int k, std::uint64_t seed) {
  return kfold_indices(train.n(), k, seed);
}

std::size_t SynthSpec::x_states() const {
  std::size_t states = 1;
  for (int j = 0; j < d; ++j) {
    states *= std::size_t(alphabet);
    if (states > (std::size_t(1) << 24))
      throw ConfigError("synth spec '" + name + "': joint table too large");
  }
  return states;
}

void SynthSpec::validate() const {
  if (n < 2) throw ConfigError("synth spec '" + name + "': n must be at least 2");
  if (d < 1 || alphabet < 1)
    throw ConfigError("synth spec '" + name + "': need d >= 1 and alphabet >= 1");
  if (!(pi_s > 0.0 && pi_s < 1.0))
    throw ConfigError("synth spec '" + name + "': pi_s must lie in (0,1)");
  const std::size_t cells = x_states() * 4;
  if (joint.size() != cells)
    throw ConfigError("synth spec '" + name + "': joint table holds " +
                      std::to_string(joint.size()) + " entries, expected " +
                      std::to_string(cells));
  double total = 0, s1 = 0;
  for (std::size_t i = 0; i < joint.size(); ++i) {
    if (joint[i] < 0) throw ConfigError("synth spec '" + name + "': negative probability");
    total += joint[i];
    if ((i / 2) % 2 == 1) s1 += joint[i];
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw ConfigError("synth spec '" + name + "': probabilities sum to " +
                      std::to_string(total));
  if (s1 <= 0.0 || s1 >= 1.0)
    throw ConfigError("synth spec '" + name + "': zero-probability sensitive value");
  if (std::abs(s1 - pi_s) > 1e-9)
    throw ConfigError("synth spec '" + name + "': declared pi_s " + std::to_string(pi_s) +
                      " does not match table marginal " + std::to_string(s1));
}

SynthResult synth_discrete(const SynthSpec& spec) {
  spec.validate();
  const std::size_t nx = spec.x_states();

  std::vector<double> px(nx, 0.0), ps(2, 0.0), py(2, 0.0);
  std::vector<double> pxs(nx * 2, 0.0), pxy(nx * 2, 0.0);
  for (std::size_t x = 0; x < nx; ++x)
    for (int s = 0; s < 2; ++s)
      for (int y = 0; y < 2; ++y) {
        const double p = spec.joint[(x * 2 + std::size_t(s)) * 2 + std::size_t(y)];
        px[x] += p;
        ps[s] += p;
        py[y] += p;
        pxs[x * 2 + std::size_t(s)] += p;
        pxy[x * 2 + std::size_t(y)] += p;
      }
  if (ps[0] <= 0 || ps[1] <= 0)
    throw ConfigError("synth spec '" + spec.name + "': zero-probability sensitive value");

  SynthResult result;
  result.exact_i_xs = table_mi_bits(pxs, px, ps);
  result.exact_i_xy = table_mi_bits(pxy, px, py);

  std::vector<double> cdf(spec.joint.size());
  double acc = 0;
  for (std::size_t i = 0; i < spec.joint.size(); ++i) {
    acc += spec.joint[i];
    cdf[i] = acc;
  }
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < spec.joint.size(); ++i)
    if (spec.joint[i] > 0) last_positive = i;

  Dataset& ds = result.dataset;
  ds.name = spec.name;
  ds.features.resize(spec.n, spec.d);
  for (int j = 0; j < spec.d; ++j) {
    ColumnSpec col;
    col.name = "x" + std::to_string(j);
    col.kind = ColumnKind::Continuous;  // integer symbols emitted as reals
    ds.columns.push_back(col);
  }

  Rng rng(derive_seed(spec.seed, "synth_discrete"));
  for (int i = 0; i < spec.n; ++i) {
    const double u = rng.next_double();
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    std::size_t flat = it == cdf.end() ? last_positive : std::size_t(it - cdf.begin());
    if (spec.joint[flat] == 0) flat = last_positive;
    ds.labels.push_back(int(flat % 2));
    ds.sensitive.push_back(int((flat / 2) % 2));
    std::size_t x = flat / 4;
    for (int j = spec.d - 1; j >= 0; --j) {  // big-endian: x0 is most significant
      ds.features(i, j) = double(x % std::size_t(spec.alphabet));
      x /= std::size_t(spec.alphabet);
    }
  }
  ds.validate();
  return result;
}

Schema schema_from_json(const nlohmann::json& j) {
  Schema schema;
  if (!j.contains("features") || !j["features"].is_array())
    throw ConfigError("schema: 'features' array missing");
  for (const auto& f : j["features"]) {
    ColumnSpec col;
    col.name = f.at("name").get<std::string>();
    const std::string kind = f.at("kind").get<std::string>();
    if (kind == "continuous")
      col.kind = ColumnKind::Continuous;
    else if (kind == "categorical")
      col.kind = ColumnKind::Categorical;
    else
      throw ConfigError("schema: unknown column kind '" + kind + "'");
    if (f.contains("vocabulary"))
      col.vocabulary = f["vocabulary"].get<std::vector<std::string>>();
    schema.feature_columns.push_back(col);
  }
  schema.label_column = j.at("label").get<std::string>();
  schema.label_positive = j.at("label_positive").get<std::string>();
  schema.sensitive_column = j.at("sensitive").get<std::string>();
  schema.sensitive_privileged = j.at("sensitive_privileged").get<std::string>();
  return schema;
}

SynthSpec synth_spec_from_json(const nlohmann::json& j) {
  SynthSpec spec;
  spec.name = j.value("name", std::string("synthetic"));
  spec.n = j.at("n").get<int>();
  spec.pi_s = j.at("pi_s").get<double>();
  spec.d = j.at("d").get<int>();
  spec.alphabet = j.at("alphabet").get<int>();
  spec.joint = j.at("joint").get<std::vector<double>>();
  spec.seed = j.at("seed").get<std::uint64_t>();
  spec.validate();
  return spec;
}

}  // namespace evalfrl::data
