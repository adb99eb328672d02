/// 25 frozen initial poses for the Original setup (see
/// [`generate_catalog`] and [`CATALOG_MASTER_SEED`]).
pub const ORIGINAL_CATALOG: [CatalogPose; 25] = [
    CatalogPose { block_x: 239.84673227821324, block_y: 166.6599244318517, block_yaw: 4.602398889005917, agent_x: 167.9779613664169, agent_y: 185.18999479131617 },
    CatalogPose { block_x: 328.3085436626473, block_y: 187.73333809644765, block_yaw: 2.9546524287886164, agent_x: 406.01193507072566, agent_y: 112.98338636274192 },
    CatalogPose { block_x: 324.44233935771786, block_y: 344.811997238059, block_yaw: 3.5151708291148385, agent_x: 145.6121309016538, agent_y: 369.16356119212446 },
    CatalogPose { block_x: 199.5799831770316, block_y: 287.10333980935184, block_yaw: 0.5638320118401956, agent_x: 406.5025316136255, agent_y: 215.22868205127108 },
    CatalogPose { block_x: 224.8010418824082, block_y: 307.22128021430956, block_yaw: 0.43015432196147607, agent_x: 136.97339179586902, agent_y: 198.79928615017207 },
    CatalogPose { block_x: 325.3282273380387, block_y: 216.02243374192807, block_yaw: 4.9722026444073455, agent_x: 309.8959649675812, agent_y: 288.3620146607912 },
    CatalogPose { block_x: 204.82239077261082, block_y: 335.776462192802, block_yaw: 2.809408623755627, agent_x: 283.07954297715, agent_y: 95.50981408312322 },
    CatalogPose { block_x: 310.8006524131973, block_y: 257.84864614048973, block_yaw: 3.7060445482511124, agent_x: 226.1278761693562, agent_y: 275.9362918701644 },
    CatalogPose { block_x: 176.51330422944778, block_y: 318.84019474511035, block_yaw: 0.4775791662714379, agent_x: 377.7705166187602, agent_y: 403.26044618477533 },
    CatalogPose { block_x: 176.03161118766383, block_y: 269.059220194504, block_yaw: 0.9219546022416114, agent_x: 347.8463623879892, agent_y: 370.8997457996923 },
    CatalogPose { block_x: 201.49527285986653, block_y: 327.9368366510373, block_yaw: 2.065268390573771, agent_x: 355.2741847647317, agent_y: 262.72800639134346 },
    CatalogPose { block_x: 266.38585487788436, block_y: 339.88567539523615, block_yaw: 1.7181498533667132, agent_x: 248.25302215807395, agent_y: 221.54966107191328 },
    CatalogPose { block_x: 298.385262548793, block_y: 165.14182321556115, block_yaw: 1.7098952920556292, agent_x: 81.74834972228773, agent_y: 114.69944942531797 },
    CatalogPose { block_x: 208.96810834479072, block_y: 275.60974820021386, block_yaw: 2.799986468507666, agent_x: 377.2327084147869, agent_y: 336.93095792116003 },
    CatalogPose { block_x: 318.5737293742135, block_y: 316.2919428707047, block_yaw: 2.8409431762783384, agent_x: 285.08676889417495, agent_y: 133.3596113525856 },
    CatalogPose { block_x: 225.15539935767373, block_y: 166.37679212758232, block_yaw: 2.21416676183838, agent_x: 300.4227628363503, agent_y: 242.45907706683585 },
    CatalogPose { block_x: 236.8838797709128, block_y: 324.48106230337055, block_yaw: 2.4788647997341764, agent_x: 286.12450303106226, agent_y: 338.5049295028119 },
    CatalogPose { block_x: 171.68296152722573, block_y: 277.555164016361, block_yaw: 3.9797780089656563, agent_x: 114.17646760721298, agent_y: 273.07449153523453 },
    CatalogPose { block_x: 294.46478116152457, block_y: 299.4069880058348, block_yaw: 4.738655845976737, agent_x: 381.5929973928968, agent_y: 91.62080203568902 },
    CatalogPose { block_x: 249.5414445403378, block_y: 170.91852032609222, block_yaw: 6.167021998670124, agent_x: 88.97294656285256, agent_y: 422.18895004389526 },
    CatalogPose { block_x: 291.6048723410463, block_y: 170.12650655058658, block_yaw: 0.8345740967300017, agent_x: 172.4032835203762, agent_y: 323.8662501178519 },
    CatalogPose { block_x: 170.21868790734382, block_y: 317.818396596113, block_yaw: 3.231896336939133, agent_x: 450.4467633462884, agent_y: 110.03997204558598 },
    CatalogPose { block_x: 241.47974833891396, block_y: 323.666443806527, block_yaw: 3.029178788462983, agent_x: 242.52376401910445, agent_y: 364.51542868163756 },
    CatalogPose { block_x: 338.4047622007216, block_y: 343.26203704108843, block_yaw: 2.541211725461555, agent_x: 217.02503302415914, agent_y: 223.91040529832418 },
    CatalogPose { block_x: 286.6235776334703, block_y: 320.6795068139804, block_yaw: 5.208186653328642, agent_x: 427.18777512254144, agent_y: 437.2282402734509 },
];
