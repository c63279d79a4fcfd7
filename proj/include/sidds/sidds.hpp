#pragma once

#include "sidds/basis.hpp"
#include "sidds/crlb.hpp"
#include "sidds/findiff.hpp"
#include "sidds/harness.hpp"
#include "sidds/integrate.hpp"
#include "sidds/linalg.hpp"
#include "sidds/lsoi.hpp"
#include "sidds/minres.hpp"
#include "sidds/noise.hpp"
#include "sidds/solver.hpp"
