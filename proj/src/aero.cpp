#include "gafield/aero.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <sstream>

namespace gafield {

namespace {

void check_unit(const char* what, const std::array<double, 3>& v) {
  const double len = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  if (std::abs(len - 1.0) > 1e-6)
    throw DataError(std::string(what) + " must be a unit vector, length " + std::to_string(len));
}

}  // namespace

CellDrag cell_drag(const std::array<double, 3>& normal, double pressure,
                   const std::array<double, 3>& wss, double area,
                   const std::array<double, 3>& inflow_dir, double rho) {
  check_unit("cell normal", normal);
  check_unit("inflow direction", inflow_dir);
  if (!(area > 0)) throw DataError("cell_drag: area must be positive");
  if (!(rho > 0)) throw DataError("cell_drag: density must be positive");
  const double n_dot_d =
      normal[0] * inflow_dir[0] + normal[1] * inflow_dir[1] + normal[2] * inflow_dir[2];
  const double tau_dot_d =
      wss[0] * inflow_dir[0] + wss[1] * inflow_dir[1] + wss[2] * inflow_dir[2];
  CellDrag out;
  out.pressure = -n_dot_d * pressure * area * rho;
  out.shear = tau_dot_d * area * rho;
  return out;
}

DragReport partwise_drag(const PointCloud& pc, const Tensor& pressure, const Tensor& wss,
                         const std::array<double, 3>& inflow_dir, double rho,
                         const std::map<int, std::string>& part_names,
                         double total_area_fallback) {
  const std::size_t n = pc.count();
  if (!pc.normals) throw DataError("partwise_drag: normals channel missing");
  if (pressure.numel() != n) throw DataError("partwise_drag: pressure field misaligned");
  if (wss.rank() != 2 || wss.rows() != n || wss.cols() != 3)
    throw DataError("partwise_drag: wss field must be N x 3");

  DragReport report;
  Tensor areas;
  if (pc.areas) {
    areas = *pc.areas;
  } else if (total_area_fallback > 0) {
    areas = Tensor::full({n}, total_area_fallback / static_cast<double>(n));
    report.approximate_areas = true;
  } else {
    throw DataError("partwise_drag: areas channel missing");
  }
  std::vector<int> parts = pc.parts;
  if (parts.empty()) parts.assign(n, 0);

  std::map<int, DragRow> rows;
  const auto& nv = pc.normals->vec();
  for (std::size_t i = 0; i < n; ++i) {
    const std::array<double, 3> normal{nv[i * 3], nv[i * 3 + 1], nv[i * 3 + 2]};
    const std::array<double, 3> tau{wss.vec()[i * 3], wss.vec()[i * 3 + 1], wss.vec()[i * 3 + 2]};
    const CellDrag cd = cell_drag(normal, pressure.vec()[i], tau, areas.vec()[i], inflow_dir, rho);
    DragRow& row = rows[parts[i]];
    row.pressure_force += cd.pressure;
    row.shear_force += cd.shear;
    row.area += areas.vec()[i];
  }
  for (auto& [label, row] : rows) {
    auto it = part_names.find(label);
    row.part = it != part_names.end() ? it->second : "part_" + std::to_string(label);
    report.parts.push_back(row);
    report.total.pressure_force += row.pressure_force;
    report.total.shear_force += row.shear_force;
    report.total.area += row.area;
  }
  report.total.part = "total";
  return report;
}

DragReport drag_from_prediction(const GaFieldModel& pressure_model,
                                const Normalizer& pressure_norm, const GaFieldModel& wss_model,
                                const Normalizer& wss_norm, const PointCloud& prepared_pressure,
                                const PointCloud& prepared_wss, const TaskSpec& spec, double rho,
                                const std::map<int, std::string>& part_names) {
  FieldPrediction p = pressure_model.forward(prepared_pressure, spec.condition());
  FieldPrediction t = wss_model.forward(prepared_wss, spec.condition());
  Tensor pressure = pressure_norm.invert(p.final);
  Tensor wss = wss_norm.invert(t.final);
  return partwise_drag(prepared_pressure, pressure, wss, spec.inflow_dir, rho, part_names);
}

std::string drag_report_csv(const DragReport& report) {
  std::ostringstream os;
  os << "part,F_p,F_tau,area\n";
  char buf[160];
  auto emit = [&](const DragRow& r) {
    std::snprintf(buf, sizeof(buf), "%s,%.17g,%.17g,%.17g\n", r.part.c_str(), r.pressure_force,
                  r.shear_force, r.area);
    os << buf;
  };
  for (const DragRow& r : report.parts) emit(r);
  emit(report.total);
  return os.str();
}

DragReport drag_report_from_csv(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  if (!std::getline(is, line) || line != "part,F_p,F_tau,area")
    throw DataError("drag csv: missing header");
  DragReport report;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::array<std::string, 4> cells;
    std::size_t cell = 0, start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        if (cell >= 4) throw DataError("drag csv: too many columns");
        cells[cell++] = line.substr(start, i - start);
        start = i + 1;
      }
    }
    if (cell != 4) throw DataError("drag csv: expected 4 columns");
    DragRow row;
    row.part = cells[0];
    row.pressure_force = std::strtod(cells[1].c_str(), nullptr);
    row.shear_force = std::strtod(cells[2].c_str(), nullptr);
    row.area = std::strtod(cells[3].c_str(), nullptr);
    if (row.part == "total") report.total = row;
    else report.parts.push_back(row);
  }
  return report;
}

}  // namespace gafield
