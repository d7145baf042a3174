#pragma once

// Result documents written by the stabilize command:
//
//   key value              scalar fields, one per line
//   ...
//   matrix E_star          a named matrix in the repo matrix format
//   <rows cols + rows>
//   trace                  the outer trace as CSV, closed by "end"
//   k,epsilon,f,fprime,warm_start_steps,inner_steps
//   ...
//   end

#include <istream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "logstab/errors.hpp"
#include "logstab/matrix_io.hpp"
#include "logstab/outer_newton.hpp"
#include "logstab/two_layer.hpp"

namespace logstab {

struct ResultDocument {
  std::vector<std::pair<std::string, std::string>> fields;
  std::vector<std::pair<std::string, Matrix>> matrices;
  OuterTrace trace;

  const std::string* field(const std::string& key) const {
    for (const auto& [k, v] : fields) {
      if (k == key) return &v;
    }
    return nullptr;
  }

  const Matrix* matrix(const std::string& name) const {
    for (const auto& [k, v] : matrices) {
      if (k == name) return &v;
    }
    return nullptr;
  }

  double number(const std::string& key) const {
    const std::string* v = field(key);
    if (!v) throw ParseError("result document has no field '" + key + "'", 0);
    return detail::parse_real(*v, 0);
  }
};

namespace detail {

inline std::string vector_text(const Vector& v) {
  std::string s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) s += ' ';
    s += format_real(v[i]);
  }
  return s;
}

inline void add_trace_fields(ResultDocument& doc, const OuterTrace& t, int total_inner_steps) {
  doc.fields.emplace_back("outer_iterations", std::to_string(t.size() == 0 ? 0 : t.size() - 1));
  doc.fields.emplace_back("inner_steps", std::to_string(total_inner_steps));
  doc.fields.emplace_back("restarts", std::to_string(t.restarts));
  doc.fields.emplace_back("backtracks", std::to_string(t.backtracks));
}

}  // namespace detail

inline ResultDocument to_document(const StabilizationResult& r) {
  ResultDocument doc;
  auto& f = doc.fields;
  f.emplace_back("kind", "one_layer");
  f.emplace_back("delta", format_real(r.delta));
  f.emplace_back("m", format_real(r.m));
  f.emplace_back("structure", to_string(r.structure));
  f.emplace_back("epsilon_star", format_real(r.epsilon_star));
  f.emplace_back("achieved_mu", format_real(r.achieved_mu));
  f.emplace_back("converged", r.converged ? "true" : "false");
  f.emplace_back("already_satisfied", r.already_satisfied ? "true" : "false");
  detail::add_trace_fields(doc, r.trace, r.total_inner_steps);
  f.emplace_back("schur_bound", format_real(r.schur_bound));
  f.emplace_back("shift_bound", format_real(r.shift_bound));
  f.emplace_back("d_star", detail::vector_text(r.d_star.d));
  if (!r.message.empty()) f.emplace_back("message", r.message);
  doc.matrices.emplace_back("E_star", r.E_star);
  doc.matrices.emplace_back("A_hat", r.A_hat);
  doc.trace = r.trace;
  return doc;
}

inline ResultDocument to_document(const TwoLayerResult& r) {
  ResultDocument doc;
  auto& f = doc.fields;
  f.emplace_back("kind", "two_layer");
  f.emplace_back("delta", format_real(r.delta));
  f.emplace_back("m", format_real(r.m));
  f.emplace_back("epsilon_star", format_real(r.epsilon_star));
  f.emplace_back("achieved_mu", format_real(r.achieved_mu));
  f.emplace_back("converged", r.converged ? "true" : "false");
  f.emplace_back("already_satisfied", r.already_satisfied ? "true" : "false");
  detail::add_trace_fields(doc, r.trace, r.total_inner_steps);
  f.emplace_back("d1_star", detail::vector_text(r.d_star.d1.d));
  f.emplace_back("d2_star", detail::vector_text(r.d_star.d2.d));
  if (!r.message.empty()) f.emplace_back("message", r.message);
  doc.matrices.emplace_back("E1_star", r.E1_star);
  doc.matrices.emplace_back("E2_star", r.E2_star);
  doc.matrices.emplace_back("A1_hat", r.A1_hat);
  doc.matrices.emplace_back("A2_hat", r.A2_hat);
  doc.trace = r.trace;
  return doc;
}

inline std::string trace_csv(const OuterTrace& t) {
  std::ostringstream os;
  os << "k,epsilon,f,fprime,warm_start_steps,inner_steps\n";
  for (std::size_t k = 0; k < t.size(); ++k) {
    os << k << ',' << format_real(t.epsilons[k]) << ',' << format_real(t.f_values[k]) << ','
       << format_real(t.fprime_values[k]) << ',' << t.warm_start_steps[k] << ',' << t.inner_steps[k] << '\n';
  }
  return os.str();
}

inline std::string format_document(const ResultDocument& doc) {
  std::ostringstream os;
  for (const auto& [k, v] : doc.fields) os << k << ' ' << v << '\n';
  for (const auto& [name, M] : doc.matrices) {
    os << "matrix " << name << '\n';
    write_matrix(os, M);
  }
  os << "trace\n" << trace_csv(doc.trace) << "end\n";
  return os.str();
}

inline ResultDocument parse_document(std::istream& in) {
  ResultDocument doc;
  std::string line;
  std::size_t line_no = 0;
  bool saw_trace = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    const std::string key = line.substr(0, sp);
    const std::string value = sp == std::string::npos ? std::string() : line.substr(sp + 1);
    if (key == "matrix") {
      if (value.empty()) throw ParseError("matrix section without a name", line_no);
      Matrix M = read_matrix(in, line_no + 1);
      line_no += static_cast<std::size_t>(M.rows()) + 1;
      doc.matrices.emplace_back(value, std::move(M));
    } else if (key == "trace") {
      saw_trace = true;
      if (!std::getline(in, line)) throw ParseError("trace without a header", line_no + 1);
      ++line_no;
      if (line.rfind("k,epsilon", 0) != 0) throw ParseError("unexpected trace header", line_no);
      while (true) {
        if (!std::getline(in, line)) throw ParseError("trace not closed by 'end'", line_no);
        ++line_no;
        if (line == "end") break;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 6) throw ParseError("trace row needs 6 cells", line_no);
        doc.trace.epsilons.push_back(detail::parse_real(cells[1], line_no));
        doc.trace.f_values.push_back(detail::parse_real(cells[2], line_no));
        doc.trace.fprime_values.push_back(detail::parse_real(cells[3], line_no));
        doc.trace.warm_start_steps.push_back(static_cast<int>(detail::parse_count(cells[4], line_no)));
        doc.trace.inner_steps.push_back(static_cast<int>(detail::parse_count(cells[5], line_no)));
      }
    } else {
      if (value.empty()) throw ParseError("field '" + key + "' has no value", line_no);
      doc.fields.emplace_back(key, value);
    }
  }
  if (!saw_trace) throw ParseError("result document has no trace section", line_no);
  if (const auto* r = doc.field("restarts")) doc.trace.restarts = static_cast<int>(detail::parse_count(*r, 0));
  if (const auto* b = doc.field("backtracks")) doc.trace.backtracks = static_cast<int>(detail::parse_count(*b, 0));
  return doc;
}

inline ResultDocument parse_document_string(const std::string& s) {
  std::istringstream in(s);
  return parse_document(in);
}

}  // namespace logstab
