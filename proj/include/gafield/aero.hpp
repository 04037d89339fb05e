#pragma once

// Part-wise drag-force decomposition from surface pressure and wall shear
// stress fields. Pressure and shear are kinematic, hence the density factor.

#include <array>
#include <map>
#include <string>
#include <vector>

#include "gafield/data.hpp"
#include "gafield/model.hpp"
#include "gafield/pointcloud.hpp"

namespace gafield {

inline constexpr double kAirDensity = 1.225;  // kg/m^3 at sea level

struct CellDrag {
  double pressure = 0;  // F_p contribution, N
  double shear = 0;     // F_tau contribution, N
};

// F_p = -(n . d_inf) p A rho, F_tau = (tau . d_inf) A rho.
CellDrag cell_drag(const std::array<double, 3>& normal, double pressure,
                   const std::array<double, 3>& wss, double area,
                   const std::array<double, 3>& inflow_dir, double rho = kAirDensity);

struct DragRow {
  std::string part;
  double pressure_force = 0;  // N
  double shear_force = 0;     // N
  double area = 0;            // m^2
};

struct DragReport {
  std::vector<DragRow> parts;
  DragRow total;
  bool approximate_areas = false;  // uniform-area fallback was used
};

// Per-part sums of cell drag plus per-part areas. The cloud must carry
// normals and part labels; missing areas fall back to a uniform
// A_total/N split (flagged approximate) when total_area_fallback > 0.
DragReport partwise_drag(const PointCloud& pc, const Tensor& pressure, const Tensor& wss,
                         const std::array<double, 3>& inflow_dir, double rho = kAirDensity,
                         const std::map<int, std::string>& part_names = {},
                         double total_area_fallback = 0.0);

// Runs pressure and WSS checkpoints on the cloud, denormalizes both fields,
// and aggregates. Each model pairs with the normalizer it was trained with.
DragReport drag_from_prediction(const GaFieldModel& pressure_model,
                                const Normalizer& pressure_norm, const GaFieldModel& wss_model,
                                const Normalizer& wss_norm, const PointCloud& prepared_pressure,
                                const PointCloud& prepared_wss, const TaskSpec& spec,
                                double rho = kAirDensity,
                                const std::map<int, std::string>& part_names = {});

// CSV with columns part,F_p,F_tau,area; values round-trip bit exactly.
std::string drag_report_csv(const DragReport& report);
DragReport drag_report_from_csv(const std::string& csv);

}  // namespace gafield
