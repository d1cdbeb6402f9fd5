package com.example.admin;

import javax.servlet.http.HttpServletRequest;

public class AdminTools {

    public String runDiagnostic(HttpServletRequest request) throws Exception {
        String tool = request.getParameter("tool");
        Runtime rt = Runtime.getRuntime();
        Process proc = rt.exec(tool);
        int code = proc.waitFor();
        return "exit=" + code;
    }
}
