#ifndef SEMIDYN_SEMIDYN_HPP
#define SEMIDYN_SEMIDYN_HPP

#include "semidyn/basis.hpp"
#include "semidyn/data.hpp"
#include "semidyn/dynamics.hpp"
#include "semidyn/error.hpp"
#include "semidyn/inference.hpp"
#include "semidyn/jacobian.hpp"
#include "semidyn/objective.hpp"
#include "semidyn/optimizer.hpp"
#include "semidyn/parallel.hpp"
#include "semidyn/quadrature.hpp"
#include "semidyn/report.hpp"
#include "semidyn/selection.hpp"
#include "semidyn/simulate.hpp"
#include "semidyn/twostage.hpp"

#endif // SEMIDYN_SEMIDYN_HPP
