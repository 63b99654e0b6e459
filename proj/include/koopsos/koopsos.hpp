#pragma once

#include "koopsos/config.hpp"
#include "koopsos/edmd.hpp"
#include "koopsos/errors.hpp"
#include "koopsos/io.hpp"
#include "koopsos/polycore.hpp"
#include "koopsos/sdp.hpp"
#include "koopsos/sdp_solver.hpp"
#include "koopsos/simkit.hpp"
#include "koopsos/sos.hpp"
#include "koopsos/synth.hpp"
